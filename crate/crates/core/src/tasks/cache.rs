//! Corpus cache file: little-endian binary with a fixed header
//! (magic, version, task-config hash, feature dim, sample count) followed by
//! per-sample records (frame count, labels, 32-bit features).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::synth::{Corpus, Sample};

const MAGIC: &[u8; 4] = b"OCRP";
const VERSION: u32 = 1;

pub fn write_corpus_cache(path: &Path, corpus: &Corpus, config_hash: &[u8; 32]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(config_hash);
    buf.extend_from_slice(&(corpus.d_in as u32).to_le_bytes());
    buf.extend_from_slice(&(corpus.samples.len() as u32).to_le_bytes());
    for s in &corpus.samples {
        buf.extend_from_slice(&(s.frames as u32).to_le_bytes());
        buf.extend_from_slice(&(s.labels.len() as u32).to_le_bytes());
        for &l in &s.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &f in &s.features {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_corpus_cache(path: &Path) -> Result<(Corpus, [u8; 32])> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format("corpus cache truncated".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let u32_at = |off: &mut usize| -> Result<u32> {
        let b = take(off, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };

    if take(&mut off, 4)? != MAGIC {
        return Err(Error::Format("bad corpus cache magic".into()));
    }
    let version = u32_at(&mut off)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "corpus cache version {version}, expected {VERSION}"
        )));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(take(&mut off, 32)?);
    let d_in = u32_at(&mut off)? as usize;
    let count = u32_at(&mut off)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let frames = u32_at(&mut off)? as usize;
        let len = u32_at(&mut off)? as usize;
        let mut labels = Vec::with_capacity(len);
        for _ in 0..len {
            labels.push(u32_at(&mut off)? as usize);
        }
        let mut features = Vec::with_capacity(frames * d_in);
        for _ in 0..frames * d_in {
            let b = take(&mut off, 4)?;
            features.push(f32::from_le_bytes(b.try_into().unwrap()));
        }
        samples.push(Sample {
            frames,
            d_in,
            features,
            labels,
        });
    }
    if off != bytes.len() {
        return Err(Error::Format("trailing bytes in corpus cache".into()));
    }
    Ok((Corpus { d_in, samples }, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::synth::{generate, SynthConfig};

    #[test]
    fn cache_round_trip_is_exact() {
        let cfg = SynthConfig {
            vocab: 3,
            d_in: 2,
            label_len: (1, 3),
            frames_per_label: (1, 4),
            noise: 0.5,
            train_size: 12,
            dev_size: 0,
            seed: 4,
        };
        let (corpus, _) = generate(&cfg).unwrap();
        let dir = std::env::temp_dir().join("orthosup_cache_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.corpus");
        let hash = [7u8; 32];
        write_corpus_cache(&path, &corpus, &hash).unwrap();
        let (back, h) = read_corpus_cache(&path).unwrap();
        assert_eq!(h, hash);
        assert_eq!(back, corpus);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("orthosup_cache_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.corpus");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_corpus_cache(&path), Err(Error::Format(_))));
        std::fs::remove_file(&path).ok();
    }
}
