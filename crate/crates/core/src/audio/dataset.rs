//! Segmentation, file-level train/val/test splits and batch sampling.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AudioBuffer;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Two seconds at 44.1 kHz.
pub const DEFAULT_SEGMENT_LENGTH: usize = 88200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Clean,
    Rendered,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Clean => "clean",
            Role::Rendered => "rendered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// File counts per split: floor for train and val, remainder to test.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // the small epsilon keeps 0.1 * 10 from flooring to 0
        let train = (n as f64 * self.train + 1e-9).floor() as usize;
        let val = ((n as f64 * self.val + 1e-9).floor() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// A window into a shared source buffer.
#[derive(Debug, Clone)]
pub struct Segment {
    pub source: Arc<AudioBuffer>,
    pub offset: usize,
    pub length: usize,
}

impl Segment {
    pub fn samples(&self) -> &[f32] {
        &self.source.samples[self.offset..self.offset + self.length]
    }

    pub fn source_id(&self) -> &str {
        &self.source.source_id
    }
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.offset == other.offset && self.length == other.length && self.source.source_id == other.source.source_id
    }
}

/// Non-overlapping consecutive windows of `length` samples; a trailing
/// remainder is dropped.
pub fn segment_audio(buf: &Arc<AudioBuffer>, length: usize) -> Result<Vec<Segment>> {
    if length == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    Ok((0..buf.len() / length)
        .map(|i| Segment {
            source: Arc::clone(buf),
            offset: i * length,
            length,
        })
        .collect())
}

fn group_seed(seed: u64, tone_label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tone_label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Assign each source id to a split. Ids are sorted, then shuffled by an
/// RNG derived from `seed` and `tone_label`, so a clean and a rendered
/// group of the same tone holding the same ids receive the same
/// assignment.
pub fn assign_splits(
    source_ids: &[String],
    ratios: SplitRatios,
    seed: u64,
    tone_label: &str,
) -> Result<BTreeMap<String, Split>> {
    ratios.validate()?;
    let mut ids: Vec<&String> = source_ids.iter().collect();
    ids.sort();
    ids.dedup();
    if ids.len() < 3 {
        return Err(Error::Split(format!(
            "group '{tone_label}' has {} source files; at least 3 are needed to fill train, val and test",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(group_seed(seed, tone_label)));
    let (train, val, _) = ratios.counts(ids.len());
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (id.clone(), split)
        })
        .collect())
}

/// One normalized source recording with its dataset labels.
#[derive(Debug, Clone)]
pub struct SourceFile {
    pub buffer: Arc<AudioBuffer>,
    pub role: Role,
    pub tone_label: String,
}

impl SourceFile {
    pub fn new(buffer: AudioBuffer, role: Role, tone_label: impl Into<String>) -> Self {
        Self {
            buffer: Arc::new(buffer),
            role,
            tone_label: tone_label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEntry {
    pub segment: Segment,
    pub role: Role,
    pub tone_label: String,
    pub split: Split,
}

/// Every segment of a corpus with its role, tone and split. When built as
/// paired, clean and rendered files of the same tone sharing a source id
/// are trimmed to a common length and their segments linked one-to-one.
#[derive(Debug, Clone)]
pub struct SegmentDataset {
    pub entries: Vec<SegmentEntry>,
    pub segment_length: usize,
    pairs: Option<Vec<(usize, usize)>>,
}

impl SegmentDataset {
    pub fn build(
        files: Vec<SourceFile>,
        segment_length: usize,
        ratios: SplitRatios,
        seed: u64,
        paired: bool,
    ) -> Result<Self> {
        if segment_length == 0 {
            return Err(Error::Config("segment length must be positive".into()));
        }
        let mut groups: BTreeMap<(String, Role), Vec<SourceFile>> = BTreeMap::new();
        for f in files {
            groups.entry((f.tone_label.clone(), f.role)).or_default().push(f);
        }
        let mut assignment: HashMap<(String, Role, String), Split> = HashMap::new();
        for ((tone, role), members) in &groups {
            let ids: Vec<String> = members.iter().map(|f| f.buffer.source_id.clone()).collect();
            if ids.len() != members.len() || {
                let mut s = ids.clone();
                s.sort();
                s.dedup();
                s.len() != ids.len()
            } {
                return Err(Error::Split(format!(
                    "duplicate source id in group '{tone}/{}'",
                    role.as_str()
                )));
            }
            for (id, split) in assign_splits(&ids, ratios, seed, tone)? {
                assignment.insert((tone.clone(), *role, id), split);
            }
        }

        let mut entries = Vec::new();
        let mut pairs = paired.then(Vec::new);
        let rendered_lookup: HashMap<(String, String), Arc<AudioBuffer>> = groups
            .iter()
            .filter(|((_, role), _)| *role == Role::Rendered)
            .flat_map(|((tone, _), members)| {
                members
                    .iter()
                    .map(|f| ((tone.clone(), f.buffer.source_id.clone()), Arc::clone(&f.buffer)))
            })
            .collect();

        let mut consumed: std::collections::HashSet<(String, String)> = Default::default();
        if let Some(pairs) = pairs.as_mut() {
            for ((tone, role), members) in &groups {
                if *role != Role::Clean {
                    continue;
                }
                for f in members {
                    let key = (tone.clone(), f.buffer.source_id.clone());
                    let Some(rendered) = rendered_lookup.get(&key) else {
                        continue;
                    };
                    let clean_split = assignment[&(tone.clone(), Role::Clean, key.1.clone())];
                    let rendered_split = assignment[&(tone.clone(), Role::Rendered, key.1.clone())];
                    if clean_split != rendered_split {
                        return Err(Error::Pairing(format!(
                            "'{}' of tone '{tone}' split differently across roles",
                            key.1
                        )));
                    }
                    let common = f.buffer.len().min(rendered.len());
                    let trim = |b: &Arc<AudioBuffer>| -> Result<Arc<AudioBuffer>> {
                        if b.len() == common {
                            Ok(Arc::clone(b))
                        } else {
                            Ok(Arc::new(AudioBuffer::new(
                                b.samples[..common].to_vec(),
                                b.sample_rate,
                                b.source_id.clone(),
                            )?))
                        }
                    };
                    let c = segment_audio(&trim(&f.buffer)?, segment_length)?;
                    let r = segment_audio(&trim(rendered)?, segment_length)?;
                    for (cs, rs) in c.into_iter().zip(r) {
                        pairs.push((entries.len(), entries.len() + 1));
                        entries.push(SegmentEntry {
                            segment: cs,
                            role: Role::Clean,
                            tone_label: tone.clone(),
                            split: clean_split,
                        });
                        entries.push(SegmentEntry {
                            segment: rs,
                            role: Role::Rendered,
                            tone_label: tone.clone(),
                            split: clean_split,
                        });
                    }
                    consumed.insert(key);
                }
            }
        }

        for ((tone, role), members) in &groups {
            for f in members {
                let key = (tone.clone(), f.buffer.source_id.clone());
                if consumed.contains(&key) {
                    continue;
                }
                let split = assignment[&(tone.clone(), *role, key.1.clone())];
                for segment in segment_audio(&f.buffer, segment_length)? {
                    entries.push(SegmentEntry {
                        segment,
                        role: *role,
                        tone_label: tone.clone(),
                        split,
                    });
                }
            }
        }
        Ok(Self {
            entries,
            segment_length,
            pairs,
        })
    }

    pub fn is_paired(&self) -> bool {
        self.pairs.is_some()
    }

    /// Segments of one role and split, optionally restricted to one tone.
    pub fn pool(&self, role: Role, tone_label: Option<&str>, split: Split) -> SegmentPool {
        SegmentPool {
            segments: self
                .entries
                .iter()
                .filter(|e| e.role == role && e.split == split && tone_label.is_none_or(|t| t == e.tone_label))
                .map(|e| e.segment.clone())
                .collect(),
        }
    }

    /// Aligned clean/rendered segment pairs of one split.
    pub fn paired_pool(&self, tone_label: Option<&str>, split: Split) -> Result<PairedPool> {
        let pairs = self
            .pairs
            .as_ref()
            .ok_or_else(|| Error::Pairing("dataset was built without clean/rendered pairing".into()))?;
        Ok(PairedPool {
            pairs: pairs
                .iter()
                .filter(|(c, _)| {
                    let e = &self.entries[*c];
                    e.split == split && tone_label.is_none_or(|t| t == e.tone_label)
                })
                .map(|&(c, r)| (self.entries[c].segment.clone(), self.entries[r].segment.clone()))
                .collect(),
        })
    }
}

/// Immutable list of segments to sample from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentPool {
    pub segments: Vec<Segment>,
}

impl SegmentPool {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedPool {
    pub pairs: Vec<(Segment, Segment)>,
}

impl PairedPool {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `batch` rows of `length` samples, row-major, with each row's origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data: Vec<f32>,
    pub batch: usize,
    pub length: usize,
    pub origins: Vec<(String, usize)>,
}

impl Batch {
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Result<Self> {
        let mut data = Vec::new();
        let mut origins = Vec::new();
        let mut length = None;
        for s in segments {
            if *length.get_or_insert(s.length) != s.length {
                return Err(Error::Batching("segments in a batch differ in length".into()));
            }
            data.extend_from_slice(s.samples());
            origins.push((s.source_id().to_string(), s.offset));
        }
        Ok(Self {
            batch: origins.len(),
            length: length.unwrap_or(0),
            data,
            origins,
        })
    }

    /// `(batch, 1, length)` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.batch, 1, self.length],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.length..(i + 1) * self.length]
    }
}

fn draw_indices(n: usize, k: usize, with_replacement: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Batching("cannot sample from an empty pool".into()));
    }
    if with_replacement {
        Ok((0..k).map(|_| rng.gen_range(0..n)).collect())
    } else if k > n {
        Err(Error::Batching(format!(
            "batch size {k} exceeds pool size {n} without replacement"
        )))
    } else {
        Ok(rand::seq::index::sample(rng, n, k).into_vec())
    }
}

/// Independent clean and rendered batches. Clean rows are drawn uniformly
/// over the union of `clean_pools` (so larger pools contribute
/// proportionally more), rendered rows uniformly from `rendered_pool`.
pub fn make_unpaired_batch(
    clean_pools: &[&SegmentPool],
    rendered_pool: &SegmentPool,
    batch_size: usize,
    with_replacement: bool,
    rng: &mut impl Rng,
) -> Result<(Batch, Batch)> {
    let merged: Vec<&Segment> = clean_pools.iter().flat_map(|p| p.segments.iter()).collect();
    let ci = draw_indices(merged.len(), batch_size, with_replacement, rng)?;
    let ri = draw_indices(rendered_pool.len(), batch_size, with_replacement, rng)?;
    Ok((
        Batch::from_segments(ci.iter().map(|&i| merged[i]))?,
        Batch::from_segments(ri.iter().map(|&i| &rendered_pool.segments[i]))?,
    ))
}

/// Sample-aligned clean and rendered batches.
pub fn make_paired_batch(
    paired: &PairedPool,
    batch_size: usize,
    with_replacement: bool,
    rng: &mut impl Rng,
) -> Result<(Batch, Batch)> {
    let idx = draw_indices(paired.len(), batch_size, with_replacement, rng)?;
    Ok((
        Batch::from_segments(idx.iter().map(|&i| &paired.pairs[i].0))?,
        Batch::from_segments(idx.iter().map(|&i| &paired.pairs[i].1))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(id: &str, n: usize, v: f32) -> AudioBuffer {
        AudioBuffer::new(vec![v; n], 44100, id).unwrap()
    }

    #[test]
    fn segment_counts() {
        for (n, k) in [(88200, 1), (220500, 2)] {
            let b = Arc::new(buf("a", n, 0.1));
            assert_eq!(segment_audio(&b, 88200).unwrap().len(), k);
        }
        let b = Arc::new(buf("a", 88199, 0.1));
        assert!(segment_audio(&b, 88200).unwrap().is_empty());
        assert!(segment_audio(&b, 0).is_err());
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        let ids = |n: usize| (0..n).map(|i| format!("f{i:03}")).collect::<Vec<_>>();
        for (n, want) in [(100, (80, 10, 10)), (10, (8, 1, 1))] {
            let a = assign_splits(&ids(n), SplitRatios::default(), 7, "tone").unwrap();
            let count = |s| a.values().filter(|&&v| v == s).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), want);
            assert_eq!(a, assign_splits(&ids(n), SplitRatios::default(), 7, "tone").unwrap());
        }
        assert!(matches!(
            assign_splits(&ids(2), SplitRatios::default(), 7, "tone"),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn unpaired_batches() {
        let one = SegmentPool::new(segment_audio(&Arc::new(buf("x", 16, 0.3)), 16).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, r) = make_unpaired_batch(&[&one], &one, 4, true, &mut rng).unwrap();
        assert_eq!(c.batch, 4);
        assert!(c.origins.iter().all(|o| o == &("x".to_string(), 0)));
        assert_eq!(r.data, vec![0.3; 64]);
        assert!(matches!(
            make_unpaired_batch(&[&one], &one, 4, false, &mut rng),
            Err(Error::Batching(_))
        ));

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = a.clone();
        let pool = SegmentPool::new(segment_audio(&Arc::new(buf("y", 160, 0.1)), 16).unwrap());
        assert_eq!(
            make_unpaired_batch(&[&pool], &pool, 3, false, &mut a).unwrap(),
            make_unpaired_batch(&[&pool], &pool, 3, false, &mut b).unwrap()
        );
    }

    #[test]
    fn paired_dataset_aligns_and_trims() {
        let mut files = Vec::new();
        for i in 0..5 {
            let id = format!("s{i}");
            files.push(SourceFile::new(buf(&id, 50, i as f32 * 0.1), Role::Clean, "t"));
            files.push(SourceFile::new(buf(&id, 45, -(i as f32) * 0.1), Role::Rendered, "t"));
        }
        let ds = SegmentDataset::build(files.clone(), 10, SplitRatios::default(), 3, true).unwrap();
        let train = ds.paired_pool(Some("t"), Split::Train).unwrap();
        // 5 files -> 4 train, each trimmed to 45 samples -> 4 segments
        assert_eq!(train.len(), 16);
        for (c, r) in &train.pairs {
            assert_eq!(c.source_id(), r.source_id());
            assert_eq!(c.offset, r.offset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, r) = make_paired_batch(&train, 5, false, &mut rng).unwrap();
        assert_eq!(c.origins, r.origins);

        let unpaired = SegmentDataset::build(files, 10, SplitRatios::default(), 3, false).unwrap();
        assert!(matches!(unpaired.paired_pool(None, Split::Val), Err(Error::Pairing(_))));
        assert_eq!(unpaired.pool(Role::Clean, None, Split::Train).len(), 4 * 5);
    }
}
