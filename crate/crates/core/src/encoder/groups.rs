//! Partition of encoder parameters into maskable groups.
//!
//! Group ids are dense and block-major with kind order FFN1, MHSA, CONV,
//! FFN2 and ascending sub index, so rebuilding from the same config always
//! yields the same assignment. Ownership follows the chunk/head slicing
//! rules: a chunk owns its slice of the first projection, the matching
//! hidden biases, and the matching rows of the second projection; a head
//! owns its q/k/v slices (weights and biases) and its rows of the output
//! projection; the conv group owns the whole module except the output bias.
//! Module norms and output biases are unmaskable base, as are the frontend,
//! positional table, final norm, and the output/auxiliary heads.

use std::collections::BTreeMap;

use crate::encoder::config::{EncoderConfig, Granularity};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Ffn1,
    Mhsa,
    Conv,
    Ffn2,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Ffn1, Kind::Mhsa, Kind::Conv, Kind::Ffn2];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Ffn1 => "ffn1",
            Kind::Mhsa => "mhsa",
            Kind::Conv => "conv",
            Kind::Ffn2 => "ffn2",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Kind::Ffn1 => 0,
            Kind::Mhsa => 1,
            Kind::Conv => 2,
            Kind::Ffn2 => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterGroup {
    pub id: usize,
    pub block: usize,
    pub kind: Kind,
    pub sub: usize,
}

pub fn chunk_param_names(block: usize, kind: Kind, sub: usize) -> [String; 3] {
    let k = kind.as_str();
    [
        format!("block{block}/{k}/{sub}/w1"),
        format!("block{block}/{k}/{sub}/b1"),
        format!("block{block}/{k}/{sub}/w2"),
    ]
}

pub fn head_param_names(block: usize, sub: usize) -> [String; 7] {
    [
        format!("block{block}/mhsa/{sub}/wq"),
        format!("block{block}/mhsa/{sub}/bq"),
        format!("block{block}/mhsa/{sub}/wk"),
        format!("block{block}/mhsa/{sub}/bk"),
        format!("block{block}/mhsa/{sub}/wv"),
        format!("block{block}/mhsa/{sub}/bv"),
        format!("block{block}/mhsa/{sub}/wo"),
    ]
}

pub fn conv_param_names(block: usize) -> [String; 5] {
    [
        format!("block{block}/conv/0/pw1_w"),
        format!("block{block}/conv/0/pw1_b"),
        format!("block{block}/conv/0/dw_w"),
        format!("block{block}/conv/0/dw_b"),
        format!("block{block}/conv/0/pw2_w"),
    ]
}

fn owned_names(block: usize, kind: Kind, sub: usize, config: &EncoderConfig) -> Vec<String> {
    match (config.granularity, kind) {
        (_, Kind::Conv) => conv_param_names(block).to_vec(),
        (Granularity::Component, Kind::Mhsa) => head_param_names(block, sub).to_vec(),
        (Granularity::Component, _) => chunk_param_names(block, kind, sub).to_vec(),
        (Granularity::Layer, Kind::Mhsa) => (0..config.num_heads())
            .flat_map(|h| head_param_names(block, h))
            .collect(),
        (Granularity::Layer, _) => (0..config.num_chunks())
            .flat_map(|c| chunk_param_names(block, kind, c))
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct GroupRegistry {
    pub granularity: Granularity,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub num_chunks: usize,
    groups: Vec<ParameterGroup>,
    owned: Vec<Vec<String>>,
    base: Vec<String>,
    param_to_group: BTreeMap<String, usize>,
}

impl GroupRegistry {
    pub fn build(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut groups = Vec::new();
        let mut owned = Vec::new();
        let mut param_to_group = BTreeMap::new();
        for block in 0..config.num_blocks {
            for kind in Kind::ALL {
                let subs = match (config.granularity, kind) {
                    (Granularity::Layer, _) | (_, Kind::Conv) => 1,
                    (Granularity::Component, Kind::Mhsa) => config.num_heads(),
                    (Granularity::Component, _) => config.num_chunks(),
                };
                for sub in 0..subs {
                    let id = groups.len();
                    groups.push(ParameterGroup {
                        id,
                        block,
                        kind,
                        sub,
                    });
                    let names = owned_names(block, kind, sub, config);
                    for n in &names {
                        if param_to_group.insert(n.clone(), id).is_some() {
                            return Err(Error::Contract(format!(
                                "parameter {n} owned by two groups"
                            )));
                        }
                    }
                    owned.push(names);
                }
            }
        }

        let mut base = vec![
            "frontend/conv_w".to_string(),
            "frontend/conv_b".to_string(),
            "frontend/proj_w".to_string(),
            "frontend/proj_b".to_string(),
            "frontend/pos".to_string(),
        ];
        for block in 0..config.num_blocks {
            for kind in Kind::ALL {
                let k = kind.as_str();
                base.push(format!("block{block}/{k}/norm/gamma"));
                base.push(format!("block{block}/{k}/norm/beta"));
                base.push(format!("block{block}/{k}/bias"));
            }
        }
        base.extend([
            "final_norm/gamma".to_string(),
            "final_norm/beta".to_string(),
            "output/w".to_string(),
            "output/b".to_string(),
            "aux/w".to_string(),
            "aux/b".to_string(),
        ]);
        for n in &base {
            if param_to_group.contains_key(n) {
                return Err(Error::Contract(format!("{n} is both base and owned")));
            }
        }

        Ok(Self {
            granularity: config.granularity,
            num_blocks: config.num_blocks,
            num_heads: config.num_heads(),
            num_chunks: config.num_chunks(),
            groups,
            owned,
            base,
            param_to_group,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParameterGroup] {
        &self.groups
    }

    pub fn group(&self, gid: usize) -> &ParameterGroup {
        &self.groups[gid]
    }

    pub fn owned_params(&self, gid: usize) -> &[String] {
        &self.owned[gid]
    }

    pub fn base_params(&self) -> &[String] {
        &self.base
    }

    /// Group owning `name`, if it is maskable.
    pub fn group_of(&self, name: &str) -> Option<usize> {
        self.param_to_group.get(name).copied()
    }

    pub fn is_base(&self, name: &str) -> bool {
        self.base.iter().any(|b| b == name)
    }

    /// Number of groups of `kind` within one block.
    pub fn slots_per_kind(&self, kind: Kind) -> usize {
        match (self.granularity, kind) {
            (Granularity::Layer, _) | (_, Kind::Conv) => 1,
            (Granularity::Component, Kind::Mhsa) => self.num_heads,
            (Granularity::Component, _) => self.num_chunks,
        }
    }

    fn block_stride(&self) -> usize {
        Kind::ALL.iter().map(|&k| self.slots_per_kind(k)).sum()
    }

    /// Dense id of (block, kind, sub).
    pub fn index_of(&self, block: usize, kind: Kind, sub: usize) -> Option<usize> {
        if block >= self.num_blocks || sub >= self.slots_per_kind(kind) {
            return None;
        }
        let mut off = block * self.block_stride();
        for k in Kind::ALL {
            if k == kind {
                break;
            }
            off += self.slots_per_kind(k);
        }
        Some(off + sub)
    }

    /// All group ids of a module.
    pub fn module_group_ids(&self, block: usize, kind: Kind) -> Vec<usize> {
        (0..self.slots_per_kind(kind))
            .filter_map(|sub| self.index_of(block, kind, sub))
            .collect()
    }
}
