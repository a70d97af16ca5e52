//! Resolution buckets for variable-size panels.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// Target training resolution, written `WxH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Bucket {
    pub width: u32,
    pub height: u32,
}

impl Bucket {
    pub const fn new(width: u32, height: u32) -> Self {
        Bucket { width, height }
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("bucket `{s}` is not WxH")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bucket `{s}` is not WxH")))
        };
        Ok(Bucket::new(parse(w)?, parse(h)?))
    }
}

impl TryFrom<String> for Bucket {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Bucket> for String {
    fn from(b: Bucket) -> String {
        b.to_string()
    }
}

pub const DEFAULT_BUCKETS: [Bucket; 4] = [
    Bucket::new(128, 128),
    Bucket::new(128, 192),
    Bucket::new(192, 128),
    Bucket::new(256, 256),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketSet {
    buckets: Vec<Bucket>,
}

impl BucketSet {
    /// Every dimension must be a nonzero multiple of `factor`.
    pub fn new(buckets: Vec<Bucket>, factor: u32) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::Config("bucket set is empty".into()));
        }
        for b in &buckets {
            if b.width == 0 || b.height == 0 || b.width % factor != 0 || b.height % factor != 0 {
                return Err(Error::Config(format!(
                    "bucket {b} is not a multiple of the downsample factor {factor}"
                )));
            }
        }
        Ok(BucketSet { buckets })
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    /// Nearest bucket by log aspect ratio, ties broken by area difference.
    pub fn assign(&self, width: u32, height: u32) -> Bucket {
        let ar = (width as f64 / height.max(1) as f64).ln();
        let area = width as f64 * height as f64;
        *self
            .buckets
            .iter()
            .min_by(|a, b| {
                let da = (a.aspect().ln() - ar).abs();
                let db = (b.aspect().ln() - ar).abs();
                da.total_cmp(&db).then_with(|| {
                    (a.area() as f64 - area)
                        .abs()
                        .total_cmp(&(b.area() as f64 - area).abs())
                })
            })
            .expect("bucket set is non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelRef {
    pub page: usize,
    pub panel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub bucket: Bucket,
    pub items: Vec<PanelRef>,
}

/// Batch size per bucket: as many panels as fit a pixel budget, clamped to
/// `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizing {
    pub min: usize,
    pub max: usize,
    pub pixel_budget: u64,
}

impl BatchSizing {
    pub fn fixed(n: usize) -> Self {
        BatchSizing {
            min: n,
            max: n,
            pixel_budget: u64::MAX,
        }
    }

    pub fn for_bucket(&self, b: &Bucket) -> usize {
        let fit = (self.pixel_budget / b.area().max(1)).min(usize::MAX as u64) as usize;
        fit.clamp(self.min.max(1), self.max.max(1))
    }
}

fn group(corpus: &Corpus, buckets: &BucketSet) -> Vec<(Bucket, Vec<PanelRef>)> {
    let mut groups: Vec<(Bucket, Vec<PanelRef>)> =
        buckets.buckets().iter().map(|&b| (b, Vec::new())).collect();
    for (pi, page) in corpus.pages().iter().enumerate() {
        for (ki, panel) in page.panels.iter().enumerate() {
            let (w, h) = panel.size();
            let b = buckets.assign(w, h);
            let slot = groups.iter_mut().find(|(g, _)| *g == b).expect("assigned bucket exists");
            slot.1.push(PanelRef { page: pi, panel: ki });
        }
    }
    groups
}

/// Deterministic batches: bucket order, then corpus order, chunked by `max_batch`.
pub fn bucket_batches(corpus: &Corpus, buckets: &BucketSet, max_batch: usize) -> impl Iterator<Item = Batch> {
    let max_batch = max_batch.max(1);
    group(corpus, buckets).into_iter().flat_map(move |(bucket, items)| {
        items
            .chunks(max_batch)
            .map(|c| Batch {
                bucket,
                items: c.to_vec(),
            })
            .collect::<Vec<_>>()
    })
}

/// One shuffled epoch: panels shuffled within buckets, chunked by the per-bucket
/// size, then the batch order shuffled.
pub fn shuffled_epoch<R: Rng + ?Sized>(
    corpus: &Corpus,
    buckets: &BucketSet,
    sizing: &BatchSizing,
    rng: &mut R,
) -> Vec<Batch> {
    let mut batches = Vec::new();
    for (bucket, mut items) in group(corpus, buckets) {
        items.shuffle(rng);
        let n = sizing.for_bucket(&bucket);
        batches.extend(items.chunks(n).map(|c| Batch {
            bucket,
            items: c.to_vec(),
        }));
    }
    batches.shuffle(rng);
    batches
}
