//! Prepared-dataset loading and batch assembly for training and evaluation.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use scrawl_core::corpus::CorpusManifest;
use scrawl_core::encoders::rasters_to_array;
use scrawl_core::model::TrainBatch;
use scrawl_core::trajectory::{
    normalize_character, pad_to_length, read_dataset, render_offline, to_offsets,
    CharacterRecord, OnlineCharacter, Raster,
};
use std::collections::BTreeMap;
use std::path::Path;

/// One preprocessed character ready for the model.
pub struct Sample {
    pub writer: String,
    pub label_idx: usize,
    pub online: OnlineCharacter,
}

/// A split of the prepared corpus, grouped by writer.
pub struct Split {
    /// Writer ids in stable order.
    pub writers: Vec<String>,
    /// Samples per writer, each sharing the writer id.
    pub by_writer: BTreeMap<String, Vec<Sample>>,
}

impl Split {
    pub fn total(&self) -> usize {
        self.by_writer.values().map(|v| v.len()).sum()
    }

    pub fn samples_of(&self, writer: &str) -> &[Sample] {
        &self.by_writer[writer]
    }

    /// Find a sample with the given label; the first match in order.
    pub fn find(&self, writer: &str, label_idx: usize) -> Option<&Sample> {
        self.by_writer
            .get(writer)?
            .iter()
            .find(|s| s.label_idx == label_idx)
    }
}

/// Everything the training and evaluation commands need from disk.
pub struct Dataset {
    pub manifest: CorpusManifest,
    pub train: Split,
    pub test: Split,
    /// Rendered canonical glyph images, one per class.
    pub content_images: Vec<Raster>,
    pub image_size: usize,
    pub n_max: usize,
}

fn label_index(manifest: &CorpusManifest, label: &str) -> Option<usize> {
    manifest.glyphs.iter().position(|g| g.class_id == label)
}

fn load_split(
    path: &Path,
    manifest: &CorpusManifest,
    writers: &[String],
    n_max: usize,
) -> anyhow::Result<Split> {
    let records = read_dataset(path)?;
    let mut by_writer: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for w in writers {
        by_writer.insert(w.clone(), Vec::new());
    }
    for rec in &records {
        let online = to_offsets(rec)?;
        if online.len() > n_max {
            anyhow::bail!(
                "record for writer {} has {} points, above the configured cap {n_max}",
                rec.writer_id,
                online.len()
            );
        }
        let label_idx = label_index(manifest, &rec.label)
            .ok_or_else(|| anyhow::anyhow!("unknown label {}", rec.label))?;
        by_writer
            .get_mut(&rec.writer_id)
            .ok_or_else(|| anyhow::anyhow!("unknown writer {}", rec.writer_id))?
            .push(Sample {
                writer: rec.writer_id.clone(),
                label_idx,
                online,
            });
    }
    Ok(Split {
        writers: writers.to_vec(),
        by_writer,
    })
}

impl Dataset {
    /// Load a prepared data directory (`train.jsonl`, `test.jsonl`,
    /// `manifest.json`).
    pub fn load(dir: &Path, image_size: usize, n_max: usize) -> anyhow::Result<Self> {
        let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CorpusManifest = serde_json::from_str(&manifest_text)?;
        let train = load_split(&dir.join("train.jsonl"), &manifest, &manifest.train_writers, n_max)?;
        let test = load_split(&dir.join("test.jsonl"), &manifest, &manifest.test_writers, n_max)?;

        let content_images = manifest
            .glyphs
            .iter()
            .map(|g| {
                let rec = CharacterRecord::new("font", g.class_id.clone(), g.strokes.clone());
                let (norm, _) = normalize_character(&rec)?;
                let online = to_offsets(&norm)?;
                Ok(render_offline(&online, image_size))
            })
            .collect::<Result<Vec<_>, anyhow::Error>>()?;

        Ok(Dataset {
            manifest,
            train,
            test,
            content_images,
            image_size,
            n_max,
        })
    }

    pub fn render_sample(&self, sample: &Sample) -> Raster {
        render_offline(&sample.online, self.image_size)
    }

    /// `(1, 1, H, W)` content image tensor for one class.
    pub fn content_tensor(&self, label_idx: usize) -> ArrayD<f32> {
        rasters_to_array(&[&self.content_images[label_idx]])
    }

    /// `(K, 1, H, W)` style tensor from the given samples.
    pub fn style_tensor(&self, samples: &[&Sample]) -> ArrayD<f32> {
        let rasters: Vec<Raster> = samples.iter().map(|s| self.render_sample(s)).collect();
        let refs: Vec<&Raster> = rasters.iter().collect();
        rasters_to_array(&refs)
    }

    /// Padded `(B, T, 5)` target rows plus real lengths.
    pub fn target_rows(&self, chars: &[&OnlineCharacter]) -> (ArrayD<f32>, Vec<usize>) {
        let b = chars.len();
        let mut rows = Array3::<f32>::zeros((b, self.n_max, 5));
        let mut lens = Vec::with_capacity(b);
        for (i, ch) in chars.iter().enumerate() {
            let padded = pad_to_length(ch, self.n_max).expect("length is checked at load");
            lens.push(ch.real_len());
            for (t, p) in padded.points.iter().enumerate() {
                for (j, v) in p.row().iter().enumerate() {
                    rows[(i, t, j)] = v as f32;
                }
            }
        }
        (rows.into_dyn(), lens)
    }
}

/// Seeded batch sampler guaranteeing two samples per chosen writer, so the
/// writer-wise objective always has an in-batch positive.
pub struct BatchSampler {
    rng: ChaCha12Rng,
    style_refs: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, style_refs: usize) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(0xba7c4);
        BatchSampler { rng, style_refs }
    }

    /// Draw a batch of `batch_size` items (`batch_size / 2` writers, two
    /// samples each) with `K` style references per item, excluding the
    /// target character from its own references.
    pub fn next_batch(&mut self, ds: &Dataset, batch_size: usize) -> TrainBatch<f32> {
        assert!(batch_size >= 2 && batch_size % 2 == 0);
        let n_writers = ds.train.writers.len();
        let k = self.style_refs;

        // distinct writers for the batch, two slots each
        let mut writer_order: Vec<usize> = (0..n_writers).collect();
        for i in (1..writer_order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            writer_order.swap(i, j);
        }
        let chosen: Vec<usize> = writer_order
            .iter()
            .copied()
            .cycle()
            .take(batch_size / 2)
            .collect();

        let mut content_rasters: Vec<Raster> = Vec::with_capacity(batch_size);
        let mut style_rasters: Vec<Raster> = Vec::with_capacity(batch_size * k);
        let mut writers = Vec::with_capacity(batch_size);
        let mut chars: Vec<&OnlineCharacter> = Vec::with_capacity(batch_size);

        for &w in &chosen {
            let writer_id = &ds.train.writers[w];
            let samples = ds.train.samples_of(writer_id);
            for _ in 0..2 {
                let target_idx = self.rng.random_range(0..samples.len());
                let target = &samples[target_idx];
                writers.push(w);
                chars.push(&target.online);
                content_rasters.push(ds.content_images[target.label_idx].clone());
                for _ in 0..k {
                    let mut ref_idx = self.rng.random_range(0..samples.len());
                    if samples.len() > 1 {
                        while ref_idx == target_idx {
                            ref_idx = self.rng.random_range(0..samples.len());
                        }
                    }
                    style_rasters.push(ds.render_sample(&samples[ref_idx]));
                }
            }
        }

        let content_refs: Vec<&Raster> = content_rasters.iter().collect();
        let style_refs: Vec<&Raster> = style_rasters.iter().collect();
        let (targets, real_lens) = ds.target_rows(&chars);
        TrainBatch {
            content: rasters_to_array(&content_refs),
            style: rasters_to_array(&style_refs),
            writers,
            targets,
            real_lens,
        }
    }

    /// Draw `n` distinct sample indices for a writer's reference set,
    /// optionally excluding indices in `exclude`.
    pub fn draw_refs(&mut self, pool: usize, n: usize, exclude: &[usize]) -> Vec<usize> {
        let candidates: Vec<usize> = (0..pool).filter(|i| !exclude.contains(i)).collect();
        assert!(candidates.len() >= n, "not enough reference candidates");
        let mut order = candidates;
        for i in (1..order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.truncate(n);
        order
    }
}

/// Tensorize a whole split for the content classifiers: rendered images,
/// offset rows, labels.
pub fn split_to_rows(ds: &Dataset, split: &Split) -> (Array3<f32>, Vec<usize>, Vec<usize>) {
    let all: Vec<&Sample> = split
        .writers
        .iter()
        .flat_map(|w| split.samples_of(w).iter())
        .collect();
    let chars: Vec<&OnlineCharacter> = all.iter().map(|s| &s.online).collect();
    let labels: Vec<usize> = all.iter().map(|s| s.label_idx).collect();
    let (rows, lens) = ds.target_rows(&chars);
    let rows3 = rows
        .into_shape_with_order(IxDyn(&[chars.len(), ds.n_max, 5]))
        .unwrap();
    let rows3 = rows3
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    (rows3, lens, labels)
}
