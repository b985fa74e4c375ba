//! Labelled spectrogram sets and fixed-length batching.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{crop_or_pad, load_wav, Analyzer, Crop, Spectrogram, FREQ_BINS};
use crate::error::{Error, Result};
use crate::parallel::map_indices;
use crate::synth::{read_manifest, CorpusItem, ManifestRow, MANIFEST};
use crate::tensor::{Shape, Tensor};

/// Corpus utterances in canonical (path) order with their spectrograms.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub rows: Vec<ManifestRow>,
    pub spectrograms: Vec<Spectrogram>,
    /// Sorted speaker labels; a speaker's class index is its position here.
    pub speakers: Vec<String>,
}

impl Corpus {
    fn assemble(mut pairs: Vec<(ManifestRow, Spectrogram)>) -> Self {
        pairs.sort_by(|a, b| a.0.path.cmp(&b.0.path));
        let speakers: BTreeSet<String> = pairs.iter().map(|(r, _)| r.speaker.clone()).collect();
        let (rows, spectrograms) = pairs.into_iter().unzip();
        Corpus {
            rows,
            spectrograms,
            speakers: speakers.into_iter().collect(),
        }
    }

    /// Read `manifest.csv` and every WAV it lists under `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_manifest(&dir.join(MANIFEST))?;
        if rows.is_empty() {
            return Err(Error::Config(format!("{} lists no utterances", dir.join(MANIFEST).display())));
        }
        let analyzer = Analyzer::new();
        let specs = map_indices(rows.len(), |i| -> Result<Spectrogram> {
            let mut utt = load_wav(&dir.join(&rows[i].path))?;
            utt.info = rows[i].info();
            analyzer.spectrogram(&utt)
        });
        let specs = specs.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Corpus::assemble(rows.into_iter().zip(specs).collect()))
    }

    pub fn from_items(items: &[CorpusItem]) -> Result<Self> {
        let analyzer = Analyzer::new();
        let specs = map_indices(items.len(), |i| analyzer.spectrogram(&items[i].utterance));
        let specs = specs.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Corpus::assemble(
            items.iter().map(|i| i.row.clone()).zip(specs).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker)).ok()
    }

    /// Per-bin mean/variance normalised copy.
    pub fn normalized(&self) -> Corpus {
        Corpus {
            rows: self.rows.clone(),
            spectrograms: self.spectrograms.iter().map(Spectrogram::normalized).collect(),
            speakers: self.speakers.clone(),
        }
    }

    pub fn indices_where(&self, keep: impl Fn(&ManifestRow) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(&self.rows[i])).collect()
    }

    pub fn dataset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices
                .iter()
                .map(|&i| Example {
                    spec: self.spectrograms[i].clone(),
                    label: self.speaker_index(&self.rows[i].speaker).expect("speaker is listed"),
                })
                .collect(),
            num_classes: self.speakers.len(),
        }
    }

    pub fn train_set(&self) -> Dataset {
        self.dataset(&self.indices_where(ManifestRow::is_train))
    }

    /// Spectrogram lookup by manifest path.
    pub fn by_path(&self) -> BTreeMap<&str, &Spectrogram> {
        self.rows
            .iter()
            .map(|r| r.path.as_str())
            .zip(self.spectrograms.iter())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub spec: Spectrogram,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

/// Split `indices` into batches of `size`. A trailing batch of one joins the
/// batch before it: batch statistics over a single example zero every pooled
/// feature, so such a step carries no gradient.
pub fn minibatches(indices: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = indices.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPolicy {
    Random,
    Center,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn distinct_labels(&self) -> usize {
        self.examples.iter().map(|e| e.label).collect::<BTreeSet<_>>().len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Stack the chosen examples as a `(batch, 1, FREQ_BINS, frames)` tensor.
    /// Random crops draw one seed per example from `rng`.
    pub fn batch(
        &self,
        indices: &[usize],
        frames: usize,
        crop: CropPolicy,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * FREQ_BINS * frames);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &self.examples[i];
            let mode = match crop {
                CropPolicy::Random => Crop::Random(rng.gen()),
                CropPolicy::Center => Crop::Center,
            };
            data.extend_from_slice(&crop_or_pad(&e.spec, frames, mode).values);
            labels.push(e.label);
        }
        let t = Tensor::from_vec(Shape::new(indices.len(), 1, FREQ_BINS, frames), data)
            .expect("batch size is consistent");
        (t, labels)
    }

    /// Label-stratified split; each label with at least two examples keeps at
    /// least one on each side.
    pub fn split(&self, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Dataset, Dataset) {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            by_label.entry(e.label).or_default().push(i);
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for members in by_label.values_mut() {
            members.shuffle(rng);
            let n = members.len();
            let mut k = (n as f64 * val_fraction).round() as usize;
            if n >= 2 {
                k = k.clamp(1, n - 1);
            } else {
                k = 0;
            }
            b.extend_from_slice(&members[..k]);
            a.extend_from_slice(&members[k..]);
        }
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::UtteranceInfo;
    use rand::SeedableRng;

    fn toy(n: usize, labels: usize) -> Dataset {
        Dataset {
            examples: (0..n)
                .map(|i| Example {
                    spec: Spectrogram {
                        frames: 20 + i,
                        values: vec![i as f64; FREQ_BINS * (20 + i)],
                        info: UtteranceInfo::default(),
                    },
                    label: i % labels,
                })
                .collect(),
            num_classes: labels,
        }
    }

    #[test]
    fn trailing_single_example_joins_previous_batch() {
        let idx: Vec<usize> = (0..7).collect();
        assert_eq!(minibatches(&idx, 3), vec![vec![0, 1, 2], vec![3, 4, 5, 6]]);
        assert_eq!(minibatches(&idx[..6], 3).len(), 2);
        assert_eq!(minibatches(&idx[..1], 4), vec![vec![0]]);
    }

    #[test]
    fn batch_shape_and_labels() {
        let ds = toy(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = ds.batch(&[4, 1], 16, CropPolicy::Random, &mut rng);
        assert_eq!(x.shape(), Shape::new(2, 1, FREQ_BINS, 16));
        assert_eq!(y, vec![1, 1]);
        assert!(x.sample(0).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = toy(20, 4);
        let (a, b) = ds.split(0.5, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.len() + b.len(), 20);
        assert_eq!(a.distinct_labels(), 4);
        assert_eq!(b.distinct_labels(), 4);
        let frames = |d: &Dataset| d.examples.iter().map(|e| e.spec.frames).collect::<BTreeSet<_>>();
        assert!(frames(&a).is_disjoint(&frames(&b)));
    }
}
