use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, CorruptionKind};
use super::dataset::{load_or_generate, CacheHeader, Dataset, CLASS_NAMES};
use super::generate::{generate_source, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::numerics::mix_seed;

const SOURCE_TAG: u64 = 0x5352_4345;
const TARGET_TAG: u64 = 0x5441_5247;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub kinds: Vec<CorruptionKind>,
    /// One severity for every domain, or one per kind.
    pub severities: Vec<u8>,
    pub per_domain: usize,
    pub source_count: usize,
    pub rounds: usize,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: vec![5],
            per_domain: 200,
            source_count: 3000,
            rounds: 1,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::config("stream needs at least one corruption kind"));
        }
        if self.severities.len() != 1 && self.severities.len() != self.kinds.len() {
            return Err(Error::config(format!(
                "{} severities given for {} kinds",
                self.severities.len(),
                self.kinds.len()
            )));
        }
        if let Some(s) = self.severities.iter().find(|&&s| !(1..=5).contains(&s)) {
            return Err(Error::config(format!("severity {s} outside 1..=5")));
        }
        if self.per_domain == 0 || self.source_count < CLASS_NAMES.len() || self.rounds == 0 {
            return Err(Error::config("stream sizes and rounds must be positive"));
        }
        Ok(())
    }

    pub fn severity(&self, domain: usize) -> u8 {
        if self.severities.len() == 1 {
            self.severities[0]
        } else {
            self.severities[domain]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub data: Dataset,
}

impl Domain {
    pub fn name(&self) -> String {
        format!("{}@{}", self.kind, self.severity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStream {
    pub source: Dataset,
    pub domains: Vec<Domain>,
    pub rounds: usize,
}

impl DomainStream {
    /// `(round, domain index, domain)` in visiting order.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize, &Domain)> {
        (0..self.rounds).flat_map(move |r| self.domains.iter().enumerate().map(move |(i, d)| (r, i, d)))
    }
}

/// Source images drawn for `seed`; the same set the source model trains on.
pub fn source_dataset(count: usize, seed: u64) -> Dataset {
    generate_source(count, mix_seed(&[seed, SOURCE_TAG]))
}

fn target_seed(seed: u64, domain: usize) -> u64 {
    mix_seed(&[seed, TARGET_TAG, domain as u64])
}

fn assemble(spec: &StreamSpec, source: Dataset, mut target: impl FnMut(usize) -> Result<Dataset>) -> Result<DomainStream> {
    let domains = spec
        .kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            Ok(Domain {
                kind,
                severity: spec.severity(i),
                data: target(i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainStream {
        source,
        domains,
        rounds: spec.rounds,
    })
}

/// One corrupted dataset per kind, each from its own freshly drawn clean
/// pool, plus the source set.
pub fn build_stream(spec: &StreamSpec, seed: u64) -> Result<DomainStream> {
    spec.validate()?;
    let source = source_dataset(spec.source_count, seed);
    assemble(spec, source, |i| {
        let pool = generate_source(spec.per_domain, target_seed(seed, i));
        corrupt(&pool, spec.kinds[i], spec.severity(i), target_seed(seed, i))
    })
}

/// [`build_stream`] backed by cache files in `dir`.
pub fn build_stream_cached(spec: &StreamSpec, seed: u64, dir: &Path) -> Result<DomainStream> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let header = |kind: Option<CorruptionKind>, severity: u8, seed: u64, count: usize| CacheHeader {
        side: IMAGE_SIDE,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        kind: kind.map(|k| k.name().to_string()),
        severity,
        seed,
        count,
    };
    let source = load_or_generate(
        &dir.join("source.ds"),
        &header(None, 0, seed, spec.source_count),
        || Ok(source_dataset(spec.source_count, seed)),
    )?;
    assemble(spec, source, |i| {
        let (kind, sev, s) = (spec.kinds[i], spec.severity(i), target_seed(seed, i));
        load_or_generate(
            &dir.join(format!("domain{i:02}_{kind}_{sev}.ds")),
            &header(Some(kind), sev, s, spec.per_domain),
            || corrupt(&generate_source(spec.per_domain, s), kind, sev, s),
        )
    })
}
