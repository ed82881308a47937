//! Synthetic handwriting corpus with two controllable style levels.
//!
//! Writer-level factors (slant shear, x/y aspect) are fixed per writer and
//! applied as an affine map; character-level factors (per-stroke bow, point
//! jitter) are resampled per character, bounded by per-writer amplitudes.
//! This makes style-disentanglement claims testable: a set-level classifier
//! can identify writers from the affine signature, while per-character
//! variation stays sample-specific.

use crate::autodiff::Scalar;
use crate::trajectory::{write_dataset, CharacterRecord, Polyline, TrajectoryError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Absolute source units a glyph's unit square maps to. A power of two so
/// the identity-profile round trip is exact in floating point.
pub const SOURCE_SCALE: f64 = 256.0;

/// Content class: control polylines on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSkeleton {
    pub class_id: String,
    pub strokes: Vec<Polyline>,
}

/// Per-writer style factors. `slant`, `scale_x`, `scale_y` are writer-wise
/// (constant across the writer's characters); `curvature_amp` and
/// `jitter_std` bound the character-wise perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WriterProfile {
    pub slant: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub curvature_amp: f64,
    pub jitter_std: f64,
    pub seed: u64,
}

impl WriterProfile {
    pub fn identity(seed: u64) -> Self {
        WriterProfile {
            slant: 0.0,
            scale_x: 1.0,
            scale_y: 1.0,
            curvature_amp: 0.0,
            jitter_std: 0.0,
            seed,
        }
    }

    pub fn check_invariants(&self) -> bool {
        self.slant.abs() <= 0.5
            && (0.5..=1.5).contains(&self.scale_x)
            && (0.5..=1.5).contains(&self.scale_y)
            && self.curvature_amp >= 0.0
            && self.jitter_std >= 0.0
    }
}

/// Symmetric Hausdorff distance between the control-point sets of two glyphs.
pub fn hausdorff(a: &GlyphSkeleton, b: &GlyphSkeleton) -> f64 {
    let pts = |g: &GlyphSkeleton| -> Vec<[f64; 2]> { g.strokes.iter().flatten().copied().collect() };
    let pa = pts(a);
    let pb = pts(b);
    let one_sided = |from: &[[f64; 2]], to: &[[f64; 2]]| -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    one_sided(&pa, &pb).max(one_sided(&pb, &pa))
}

fn random_skeleton(class_id: &str, points_per_stroke: usize, rng: &mut ChaCha12Rng) -> GlyphSkeleton {
    let n_strokes = rng.random_range(1..=3);
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let mut pts = Vec::with_capacity(points_per_stroke);
        let mut p = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        let step = rng.random_range(0.08..0.16);
        pts.push(p);
        for _ in 1..points_per_stroke {
            angle += rng.random_range(-0.9..0.9);
            p = [
                (p[0] + step * angle.cos()).clamp(0.03, 0.97),
                (p[1] + step * angle.sin()).clamp(0.03, 0.97),
            ];
            pts.push(p);
        }
        strokes.push(pts);
    }
    GlyphSkeleton {
        class_id: class_id.to_string(),
        strokes,
    }
}

/// Separation floor between any two glyph classes.
pub const GLYPH_MIN_SEPARATION: f64 = 0.05;

/// Deterministically generate `n_classes` pairwise-distinct skeletons;
/// colliding candidates (symmetric Hausdorff <= 0.05 to an accepted one)
/// are regenerated.
pub fn make_glyph_bank(n_classes: usize, points_per_stroke: usize, seed: u64) -> Vec<GlyphSkeleton> {
    assert!(n_classes >= 2, "need at least two content classes");
    assert!(points_per_stroke >= 2);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0x91);
    let mut bank: Vec<GlyphSkeleton> = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let class_id = format!("c{k:03}");
        loop {
            let cand = random_skeleton(&class_id, points_per_stroke, &mut rng);
            if bank
                .iter()
                .all(|g| hausdorff(g, &cand) > GLYPH_MIN_SEPARATION)
            {
                bank.push(cand);
                break;
            }
        }
    }
    bank
}

/// Draw one character: writer-deterministic affine map
/// `x' = scale_x * (x + tan(slant) * y)`, `y' = scale_y * y`, followed by
/// sample-dependent per-stroke bow and i.i.d. point jitter, emitted in
/// source units.
pub fn render_writer_sample(
    profile: &WriterProfile,
    glyph: &GlyphSkeleton,
    sample_seed: u64,
) -> CharacterRecord {
    let mut rng = ChaCha12Rng::seed_from_u64(profile.seed);
    rng.set_stream(sample_seed.wrapping_add(1));
    let shear = profile.slant.tan();

    let strokes: Vec<Polyline> = glyph
        .strokes
        .iter()
        .map(|stroke| {
            // affine, writer-wise
            let mapped: Polyline = stroke
                .iter()
                .map(|p| [profile.scale_x * (p[0] + shear * p[1]), profile.scale_y * p[1]])
                .collect();
            // bow, character-wise: perpendicular displacement along the chord
            let amp = profile.curvature_amp * rng.random_range(-1.0..1.0);
            let first = mapped[0];
            let last = mapped[mapped.len() - 1];
            let chord = [last[0] - first[0], last[1] - first[1]];
            let len = (chord[0] * chord[0] + chord[1] * chord[1]).sqrt();
            let normal = if len > 1e-12 {
                [-chord[1] / len, chord[0] / len]
            } else {
                [0.0, 1.0]
            };
            let n = mapped.len();
            mapped
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    let bow = amp * (std::f64::consts::PI * s).sin();
                    let jx = profile.jitter_std * f64::sample_normal(&mut rng);
                    let jy = profile.jitter_std * f64::sample_normal(&mut rng);
                    [
                        (p[0] + bow * normal[0] + jx) * SOURCE_SCALE,
                        (p[1] + bow * normal[1] + jy) * SOURCE_SCALE,
                    ]
                })
                .collect()
        })
        .collect();

    CharacterRecord::new(format!("w{}", profile.seed), glyph.class_id.clone(), strokes)
}

/// Corpus generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_writers: usize,
    pub n_classes: usize,
    pub samples_per_pair: usize,
    pub points_per_stroke: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            n_writers: 20,
            n_classes: 40,
            samples_per_pair: 10,
            points_per_stroke: 8,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Everything a test or evaluation run needs to introspect the corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub params: CorpusParams,
    pub train_writers: Vec<String>,
    pub test_writers: Vec<String>,
    pub profiles: Vec<(String, WriterProfile)>,
    pub glyphs: Vec<GlyphSkeleton>,
}

/// Generated corpus held in memory before it is written out.
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub train: Vec<CharacterRecord>,
    pub test: Vec<CharacterRecord>,
}

fn writer_id(idx: usize) -> String {
    format!("w{idx:03}")
}

/// Build the full corpus: writer profiles, glyph bank, per-(writer, class)
/// samples, split by writer so test writers are never seen in training.
pub fn build_corpus(params: &CorpusParams) -> Corpus {
    assert!(params.n_writers >= 4, "need at least four writers");
    let glyphs = make_glyph_bank(params.n_classes, params.points_per_stroke, params.seed);

    let mut master = ChaCha12Rng::seed_from_u64(params.seed);
    master.set_stream(0xa11); // profile stream, distinct from glyph stream
    let profiles: Vec<(String, WriterProfile)> = (0..params.n_writers)
        .map(|w| {
            let profile = WriterProfile {
                slant: master.random_range(-0.45..0.45),
                scale_x: master.random_range(0.6..1.4),
                scale_y: master.random_range(0.6..1.4),
                curvature_amp: master.random_range(0.02..0.08),
                jitter_std: master.random_range(0.002..0.008),
                seed: master.random(),
            };
            (writer_id(w), profile)
        })
        .collect();

    // split by writer: seeded shuffle, first chunk trains
    let mut order: Vec<usize> = (0..params.n_writers).collect();
    let mut split_rng = ChaCha12Rng::seed_from_u64(params.seed);
    split_rng.set_stream(0x5011);
    for i in (1..order.len()).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((params.n_writers as f64) * params.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, params.n_writers - 1);
    let train_set: std::collections::BTreeSet<usize> = order[..n_train].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (w, (wid, profile)) in profiles.iter().enumerate() {
        for (k, glyph) in glyphs.iter().enumerate() {
            for s in 0..params.samples_per_pair {
                let sample_seed = ((k * params.samples_per_pair + s) as u64) << 1;
                let mut rec = render_writer_sample(profile, glyph, sample_seed);
                rec.writer_id = wid.clone();
                if train_set.contains(&w) {
                    train.push(rec);
                } else {
                    test.push(rec);
                }
            }
        }
    }

    let train_writers: Vec<String> = (0..params.n_writers)
        .filter(|w| train_set.contains(w))
        .map(writer_id)
        .collect();
    let test_writers: Vec<String> = (0..params.n_writers)
        .filter(|w| !train_set.contains(w))
        .map(writer_id)
        .collect();

    Corpus {
        manifest: CorpusManifest {
            params: params.clone(),
            train_writers,
            test_writers,
            profiles,
            glyphs,
        },
        train,
        test,
    }
}

impl Corpus {
    /// Write `train.jsonl`, `test.jsonl`, and `manifest.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), TrajectoryError> {
        std::fs::create_dir_all(dir)?;
        write_dataset(&self.train, &dir.join("train.jsonl"))?;
        write_dataset(&self.test, &dir.join("test.jsonl"))?;
        let manifest =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serialization");
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_bank_deterministic_and_distinct() {
        let a = make_glyph_bank(6, 6, 42);
        let b = make_glyph_bank(6, 6, 42);
        assert_eq!(a, b);

        let two = make_glyph_bank(2, 6, 7);
        assert_eq!(two.len(), 2);
        assert_ne!(two[0].strokes, two[1].strokes);

        // independent pairwise Hausdorff oracle
        for i in 0..a.len() {
            for j in 0..i {
                let pa: Vec<[f64; 2]> = a[i].strokes.iter().flatten().copied().collect();
                let pb: Vec<[f64; 2]> = a[j].strokes.iter().flatten().copied().collect();
                let mut h = 0.0f64;
                for p in &pa {
                    let mut best = f64::INFINITY;
                    for q in &pb {
                        best = best.min(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
                    }
                    h = h.max(best);
                }
                for q in &pb {
                    let mut best = f64::INFINITY;
                    for p in &pa {
                        best = best.min(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
                    }
                    h = h.max(best);
                }
                assert!(h > GLYPH_MIN_SEPARATION, "classes {i},{j} too close: {h}");
            }
        }
    }

    #[test]
    fn glyph_coordinates_in_unit_square() {
        for g in make_glyph_bank(10, 8, 3) {
            for p in g.strokes.iter().flatten() {
                assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            }
        }
    }

    #[test]
    fn identity_profile_reproduces_glyph() {
        let bank = make_glyph_bank(3, 6, 1);
        let profile = WriterProfile::identity(99);
        let rec = render_writer_sample(&profile, &bank[0], 0);
        for (s_out, s_in) in rec.strokes.iter().zip(bank[0].strokes.iter()) {
            for (p_out, p_in) in s_out.iter().zip(s_in.iter()) {
                assert_eq!(p_out[0], p_in[0] * SOURCE_SCALE);
                assert_eq!(p_out[1], p_in[1] * SOURCE_SCALE);
            }
        }
    }

    #[test]
    fn slant_closed_form() {
        let bank = make_glyph_bank(3, 6, 1);
        let theta = 0.3f64;
        let profile = WriterProfile {
            slant: theta,
            ..WriterProfile::identity(5)
        };
        let rec = render_writer_sample(&profile, &bank[1], 0);
        for (s_out, s_in) in rec.strokes.iter().zip(bank[1].strokes.iter()) {
            for (p_out, p_in) in s_out.iter().zip(s_in.iter()) {
                let expect_x = (p_in[0] + theta.tan() * p_in[1]) * SOURCE_SCALE;
                assert!((p_out[0] - expect_x).abs() < 1e-12);
                assert!((p_out[1] - p_in[1] * SOURCE_SCALE).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_determinism_and_variation() {
        let bank = make_glyph_bank(3, 6, 2);
        let profile = WriterProfile {
            slant: 0.2,
            scale_x: 1.1,
            scale_y: 0.9,
            curvature_amp: 0.05,
            jitter_std: 0.005,
            seed: 77,
        };
        let a = render_writer_sample(&profile, &bank[0], 4);
        let b = render_writer_sample(&profile, &bank[0], 4);
        assert_eq!(a, b);
        let c = render_writer_sample(&profile, &bank[0], 5);
        assert_ne!(a.strokes, c.strokes, "character-level factors must vary");
        for p in a.strokes.iter().flatten() {
            assert!(p[0].is_finite() && p[1].is_finite());
        }
    }

    #[test]
    fn corpus_split_and_counts() {
        let params = CorpusParams {
            n_writers: 20,
            n_classes: 5,
            samples_per_pair: 3,
            ..CorpusParams::default()
        };
        let corpus = build_corpus(&params);
        assert_eq!(corpus.manifest.train_writers.len(), 16);
        assert_eq!(corpus.manifest.test_writers.len(), 4);
        let overlap: Vec<_> = corpus
            .manifest
            .train_writers
            .iter()
            .filter(|w| corpus.manifest.test_writers.contains(w))
            .collect();
        assert!(overlap.is_empty());
        assert_eq!(corpus.train.len() + corpus.test.len(), 20 * 5 * 3);
        assert_eq!(corpus.test.len(), 4 * 5 * 3);
        for (_, p) in &corpus.manifest.profiles {
            assert!(p.check_invariants());
        }
    }

    #[test]
    fn corpus_files_byte_identical_across_runs() {
        let params = CorpusParams {
            n_writers: 5,
            n_classes: 3,
            samples_per_pair: 2,
            ..CorpusParams::default()
        };
        let base = std::env::temp_dir().join(format!("corpus_test_{}", std::process::id()));
        let d1 = base.join("a");
        let d2 = base.join("b");
        build_corpus(&params).write_to(&d1).unwrap();
        build_corpus(&params).write_to(&d2).unwrap();
        for f in ["train.jsonl", "test.jsonl", "manifest.json"] {
            let b1 = std::fs::read(d1.join(f)).unwrap();
            let b2 = std::fs::read(d2.join(f)).unwrap();
            assert_eq!(b1, b2, "{f} differs between identical runs");
        }
        std::fs::remove_dir_all(&base).ok();
    }
}
