//! Synthetic sequence-labeling corpus: each label emits its Gaussian class
//! prototype for 1-4 frames plus isotropic noise. Generation is pure per
//! (seed, sample index), so parallel generation and replays are byte-exact.

use crate::autodiff::{Scalar, Tensor};
use crate::encoder::subsampled_len;
use crate::error::{Error, Result};
use crate::rng::{streams, CounterRng};
use crate::tasks::ctc::ctc_min_frames;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Number of real labels V; 0 is reserved for blank.
    pub vocab: usize,
    pub d_in: usize,
    pub label_len: (usize, usize),
    pub frames_per_label: (usize, usize),
    /// Standard deviation of per-frame noise around the class prototype.
    pub noise: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab {} < 2", self.vocab)));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be positive".into()));
        }
        let (lmin, lmax) = self.label_len;
        if lmin < 1 || lmin > lmax {
            return Err(Error::Config(format!("label_len bounds [{lmin},{lmax}] infeasible")));
        }
        let (fmin, fmax) = self.frames_per_label;
        if fmin < 1 || fmin > fmax {
            return Err(Error::Config(format!(
                "frames_per_label bounds [{fmin},{fmax}] infeasible"
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!("noise {} negative", self.noise)));
        }
        Ok(())
    }
}

/// One utterance: `frames × d_in` features (stored 32-bit, matching the
/// cache file format) and the reference label sequence over `1..=V`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: usize,
    pub d_in: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Sample {
    pub fn features_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.features.iter().map(|&v| S::from_f64(v as f64)).collect();
        Tensor::new(self.frames, self.d_in, data).expect("consistent sample")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_in: usize,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn class_prototypes(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = CounterRng::new(config.seed, &[streams::CORPUS, 0]);
    (0..config.vocab)
        .map(|_| (0..config.d_in).map(|_| rng.normal()).collect())
        .collect()
}

fn gen_sample(config: &SynthConfig, protos: &[Vec<f64>], index: usize) -> Sample {
    let mut rng = CounterRng::new(config.seed, &[streams::CORPUS, 1 + index as u64]);
    let (lmin, lmax) = config.label_len;
    let len = lmin + rng.below(lmax - lmin + 1);
    let labels: Vec<usize> = (0..len).map(|_| 1 + rng.below(config.vocab)).collect();
    let (fmin, fmax) = config.frames_per_label;
    let mut counts: Vec<usize> = (0..len).map(|_| fmin + rng.below(fmax - fmin + 1)).collect();

    // Extend segments round-robin until the post-frontend length admits the
    // target under CTC.
    let needed = ctc_min_frames(&labels);
    let mut bump = 0usize;
    while subsampled_len(counts.iter().sum()) < needed {
        counts[bump % len] += 1;
        bump += 1;
    }

    let frames: usize = counts.iter().sum();
    let mut features = Vec::with_capacity(frames * config.d_in);
    for (j, &label) in labels.iter().enumerate() {
        let proto = &protos[label - 1];
        for _ in 0..counts[j] {
            for &p in proto {
                let v = p + config.noise * rng.normal();
                features.push(v as f32);
            }
        }
    }
    Sample {
        frames,
        d_in: config.d_in,
        features,
        labels,
    }
}

/// Generate the train and dev corpora. Sample i of the dev set uses index
/// `train_size + i`, so the two sets never share draws.
pub fn generate(config: &SynthConfig) -> Result<(Corpus, Corpus)> {
    generate_with_threads(config, 1)
}

/// Same output as [`generate`], optionally fanning sample synthesis across
/// `threads` worker threads.
pub fn generate_with_threads(config: &SynthConfig, threads: usize) -> Result<(Corpus, Corpus)> {
    config.validate()?;
    let protos = class_prototypes(config);
    let total = config.train_size + config.dev_size;
    let threads = threads.max(1).min(total.max(1));

    let samples: Vec<Sample> = if threads <= 1 || total == 0 {
        (0..total).map(|i| gen_sample(config, &protos, i)).collect()
    } else {
        let chunk = total.div_ceil(threads);
        let mut out: Vec<Option<Sample>> = vec![None; total];
        std::thread::scope(|scope| {
            let mut rest = out.as_mut_slice();
            let mut start = 0usize;
            let mut handles = Vec::new();
            while !rest.is_empty() {
                let take = chunk.min(rest.len());
                let (head, tail) = rest.split_at_mut(take);
                let protos = &protos;
                handles.push(scope.spawn(move || {
                    for (off, slot) in head.iter_mut().enumerate() {
                        *slot = Some(gen_sample(config, protos, start + off));
                    }
                }));
                rest = tail;
                start += take;
            }
            for h in handles {
                h.join().expect("corpus worker panicked");
            }
        });
        out.into_iter().map(|s| s.expect("all samples filled")).collect()
    };

    let mut samples = samples;
    let dev = samples.split_off(config.train_size);
    Ok((
        Corpus {
            d_in: config.d_in,
            samples,
        },
        Corpus {
            d_in: config.d_in,
            samples: dev,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            vocab: 4,
            d_in: 3,
            label_len: (1, 5),
            frames_per_label: (1, 4),
            noise: 0.25,
            train_size: 40,
            dev_size: 10,
            seed: 9,
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (a, _) = generate(&cfg()).unwrap();
        let (b, _) = generate(&cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let (a, ad) = generate(&cfg()).unwrap();
        let (b, bd) = generate_with_threads(&cfg(), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(ad, bd);
    }

    #[test]
    fn all_samples_are_ctc_feasible_post_frontend() {
        let (train, dev) = generate(&cfg()).unwrap();
        for s in train.samples.iter().chain(&dev.samples) {
            assert!(subsampled_len(s.frames) >= ctc_min_frames(&s.labels));
        }
    }

    #[test]
    fn zero_noise_emits_exact_prototypes() {
        let mut c = cfg();
        c.noise = 0.0;
        let protos = class_prototypes(&c);
        let (train, _) = generate(&c).unwrap();
        for s in &train.samples {
            let mut f = 0usize;
            for &label in &s.labels {
                // every frame of the segment equals the prototype
                while f < s.frames {
                    let frame = &s.features[f * c.d_in..(f + 1) * c.d_in];
                    let proto: Vec<f32> = protos[label - 1].iter().map(|&p| p as f32).collect();
                    if frame != proto.as_slice() {
                        break;
                    }
                    f += 1;
                }
            }
            assert_eq!(f, s.frames, "frames not covered by prototype segments");
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        let mut c = cfg();
        c.label_len = (3, 2);
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let mut c = cfg();
        c.frames_per_label = (0, 4);
        assert!(generate(&c).is_err());
        let mut c = cfg();
        c.vocab = 1;
        assert!(generate(&c).is_err());
    }
}
