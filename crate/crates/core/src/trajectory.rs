//! Canonical data model for online characters: pen-point sequences with
//! down/up/end states, polyline simplification, normalization, offset and
//! absolute coordinate conversions, rasterization, and dataset files.
//!
//! All functions here are pure; records are plain data.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("record has no points")]
    EmptyRecord,
    #[error("character has {len} points, longer than the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pen state attached to each trajectory point. The state describes the
/// transition after the point: `Down` means the stroke continues, `Up`
/// closes a stroke, `End` closes the character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenState {
    Down,
    Up,
    End,
}

impl PenState {
    /// One-hot triple `(m1, m2, m3)`.
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            PenState::Down => [1.0, 0.0, 0.0],
            PenState::Up => [0.0, 1.0, 0.0],
            PenState::End => [0.0, 0.0, 1.0],
        }
    }

    pub fn from_one_hot(m: [f64; 3]) -> Option<Self> {
        let ones = m.iter().filter(|&&v| v == 1.0).count();
        let zeros = m.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != 2 {
            return None;
        }
        if m[0] == 1.0 {
            Some(PenState::Down)
        } else if m[1] == 1.0 {
            Some(PenState::Up)
        } else {
            Some(PenState::End)
        }
    }
}

/// One pen point: relative offsets plus state, the 5-element row
/// `(du, dv, m1, m2, m3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub du: f64,
    pub dv: f64,
    pub state: PenState,
}

impl TrajectoryPoint {
    pub fn new(du: f64, dv: f64, state: PenState) -> Self {
        TrajectoryPoint { du, dv, state }
    }

    pub fn row(&self) -> [f64; 5] {
        let m = self.state.one_hot();
        [self.du, self.dv, m[0], m[1], m[2]]
    }

    /// The padding row `(0, 0, 0, 0, 1)`.
    pub fn padding() -> Self {
        TrajectoryPoint::new(0.0, 0.0, PenState::End)
    }
}

/// An online character: ordered pen points, possibly padded with end rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineCharacter {
    pub points: Vec<TrajectoryPoint>,
}

impl OnlineCharacter {
    pub fn new(points: Vec<TrajectoryPoint>) -> Self {
        OnlineCharacter { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Count of real (unpadded) points: everything up to and including the
    /// first end-state point.
    pub fn real_len(&self) -> usize {
        for (i, p) in self.points.iter().enumerate() {
            if p.state == PenState::End {
                return i + 1;
            }
        }
        self.points.len()
    }

    /// Check the structural invariants: nonempty, at most one end state
    /// among real points (and only at the end), finite offsets, padding
    /// rows all equal to `(0,0,0,0,1)`.
    pub fn check_invariants(&self) -> bool {
        if self.points.is_empty() {
            return false;
        }
        let real = self.real_len();
        if real < 1 {
            return false;
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.du.is_finite() || !p.dv.is_finite() {
                return false;
            }
            if i < real - 1 && p.state == PenState::End {
                return false;
            }
            if i >= real && (p.state != PenState::End || p.du != 0.0 || p.dv != 0.0) {
                return false;
            }
        }
        true
    }
}

/// Absolute-coordinate polyline.
pub type Polyline = Vec<[f64; 2]>;

/// Persisted sample: writer, class label, strokes in source units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterRecord {
    pub writer_id: String,
    pub label: String,
    pub strokes: Vec<Polyline>,
}

impl CharacterRecord {
    pub fn new(writer_id: impl Into<String>, label: impl Into<String>, strokes: Vec<Polyline>) -> Self {
        CharacterRecord {
            writer_id: writer_id.into(),
            label: label.into(),
            strokes,
        }
    }

    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(|s| s.len()).sum()
    }

    pub fn bbox(&self) -> Option<[f64; 4]> {
        let mut it = self.strokes.iter().flatten();
        let first = it.next()?;
        let mut bb = [first[0], first[1], first[0], first[1]];
        for p in self.strokes.iter().flatten() {
            bb[0] = bb[0].min(p[0]);
            bb[1] = bb[1].min(p[1]);
            bb[2] = bb[2].max(p[0]);
            bb[3] = bb[3].max(p[1]);
        }
        Some(bb)
    }
}

// ---- simplification -------------------------------------------------------

fn seg_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return (ap[0] * ap[0] + ap[1] * ap[1]).sqrt();
    }
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    let proj = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - proj[0]).powi(2) + (p[1] - proj[1]).powi(2)).sqrt()
}

fn rdp_mark(points: &[[f64; 2]], lo: usize, hi: usize, eps: f64, keep: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let mut best = lo;
    let mut best_d = -1.0;
    for i in lo + 1..hi {
        let d = seg_distance(points[i], points[lo], points[hi]);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    if best_d > eps {
        keep[best] = true;
        rdp_mark(points, lo, best, eps, keep);
        rdp_mark(points, best, hi, eps, keep);
    }
}

/// Ramer-Douglas-Peucker simplification with perpendicular tolerance
/// `epsilon` in the stroke's own units. Output is a subsequence of the
/// input with both endpoints retained.
pub fn rdp_simplify(stroke: &[[f64; 2]], epsilon: f64) -> Polyline {
    assert!(epsilon >= 0.0, "epsilon must be nonnegative");
    if stroke.len() <= 2 {
        return stroke.to_vec();
    }
    let mut keep = vec![false; stroke.len()];
    keep[0] = true;
    keep[stroke.len() - 1] = true;
    rdp_mark(stroke, 0, stroke.len() - 1, epsilon, &mut keep);
    stroke
        .iter()
        .zip(keep.iter())
        .filter_map(|(p, &k)| if k { Some(*p) } else { None })
        .collect()
}

// ---- normalization ---------------------------------------------------------

/// Uniformly scale and translate so the bounding box is centered in the
/// unit square with the longer side spanning exactly `[0, 1]`. Returns the
/// normalized record and a degeneracy flag (all points identical).
pub fn normalize_character(record: &CharacterRecord) -> Result<(CharacterRecord, bool), TrajectoryError> {
    let bb = record.bbox().ok_or(TrajectoryError::EmptyRecord)?;
    let (w, h) = (bb[2] - bb[0], bb[3] - bb[1]);
    let side = w.max(h);
    let cx = 0.5 * (bb[0] + bb[2]);
    let cy = 0.5 * (bb[1] + bb[3]);
    let degenerate = side == 0.0;
    let scale = if degenerate { 0.0 } else { 1.0 / side };
    let strokes = record
        .strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|p| [(p[0] - cx) * scale + 0.5, (p[1] - cy) * scale + 0.5])
                .collect()
        })
        .collect();
    Ok((
        CharacterRecord::new(record.writer_id.clone(), record.label.clone(), strokes),
        degenerate,
    ))
}

// ---- offsets <-> absolute ---------------------------------------------------

/// Convert absolute strokes to the offset representation. The first point
/// is offset from the origin; each later point from its predecessor, across
/// stroke boundaries too.
pub fn to_offsets(record: &CharacterRecord) -> Result<OnlineCharacter, TrajectoryError> {
    if record.point_count() == 0 {
        return Err(TrajectoryError::EmptyRecord);
    }
    let n_strokes = record.strokes.len();
    let mut prev = [0.0f64, 0.0];
    let mut points = Vec::with_capacity(record.point_count());
    for (si, stroke) in record.strokes.iter().enumerate() {
        for (pi, p) in stroke.iter().enumerate() {
            let last_in_stroke = pi == stroke.len() - 1;
            let state = if !last_in_stroke {
                PenState::Down
            } else if si == n_strokes - 1 {
                PenState::End
            } else {
                PenState::Up
            };
            points.push(TrajectoryPoint::new(p[0] - prev[0], p[1] - prev[1], state));
            prev = *p;
        }
    }
    Ok(OnlineCharacter::new(points))
}

/// Cumulative-sum inverse of [`to_offsets`]: rebuild absolute strokes,
/// splitting after up-state points and stopping at the first end state.
/// Padding rows contribute nothing.
pub fn to_absolute(ch: &OnlineCharacter) -> Vec<Polyline> {
    let mut strokes: Vec<Polyline> = Vec::new();
    let mut current: Polyline = Vec::new();
    let mut pos = [0.0f64, 0.0];
    for p in &ch.points[..ch.real_len().min(ch.len())] {
        pos = [pos[0] + p.du, pos[1] + p.dv];
        current.push(pos);
        match p.state {
            PenState::Down => {}
            PenState::Up => {
                strokes.push(std::mem::take(&mut current));
            }
            PenState::End => {
                strokes.push(std::mem::take(&mut current));
                break;
            }
        }
    }
    if !current.is_empty() {
        strokes.push(current);
    }
    strokes
}

/// Pad with `(0,0,0,0,1)` rows up to `n_max`; the real prefix is untouched.
pub fn pad_to_length(ch: &OnlineCharacter, n_max: usize) -> Result<OnlineCharacter, TrajectoryError> {
    if ch.len() > n_max {
        return Err(TrajectoryError::TooLong {
            len: ch.len(),
            max: n_max,
        });
    }
    let mut points = ch.points.clone();
    points.resize(n_max, TrajectoryPoint::padding());
    Ok(OnlineCharacter::new(points))
}

// ---- rasterization -----------------------------------------------------------

/// Minimal owned grayscale raster (`0` black .. `255` white).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn black(size: usize) -> Self {
        Raster {
            size,
            pixels: vec![0; size * size],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.size + x]
    }

    fn set(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size {
            self.pixels[y as usize * self.size + x as usize] = v;
        }
    }

    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64) {
        // Bresenham, no anti-aliasing
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, 255);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        let img = image::GrayImage::from_raw(self.size as u32, self.size as u32, self.pixels.clone())
            .expect("raster buffer size");
        img.save_with_format(path, image::ImageFormat::Png)
    }

    pub fn load_png(path: &Path) -> Result<Self, image::ImageError> {
        let img = image::open(path)?.into_luma8();
        let size = img.width() as usize;
        Ok(Raster {
            size,
            pixels: img.into_raw(),
        })
    }
}

const RENDER_MARGIN: usize = 2;

/// Deterministic white-on-black rendering of a normalized character:
/// 1-pixel segments between consecutive points whose predecessor is
/// pen-down, 2-pixel margin.
pub fn render_offline(ch: &OnlineCharacter, size: usize) -> Raster {
    assert!(size >= 8, "raster size must be at least 8");
    let mut img = Raster::black(size);
    let span = (size - 1 - 2 * RENDER_MARGIN) as f64;
    let map = |p: [f64; 2]| -> (i64, i64) {
        (
            RENDER_MARGIN as i64 + (p[0] * span).round() as i64,
            RENDER_MARGIN as i64 + (p[1] * span).round() as i64,
        )
    };
    for stroke in to_absolute(ch) {
        if stroke.len() == 1 {
            let (x, y) = map(stroke[0]);
            img.set(x, y, 255);
            continue;
        }
        for seg in stroke.windows(2) {
            let (x0, y0) = map(seg[0]);
            let (x1, y1) = map(seg[1]);
            img.line(x0, y0, x1, y1);
        }
    }
    img
}

// ---- dataset files -------------------------------------------------------------

/// Write records as UTF-8 line-delimited JSON.
pub fn write_dataset(records: &[CharacterRecord], path: &Path) -> Result<(), TrajectoryError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serialization");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a line-delimited JSON dataset; a malformed line reports its number.
pub fn read_dataset(path: &Path) -> Result<Vec<CharacterRecord>, TrajectoryError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| TrajectoryError::Parse {
            line: i + 1,
            source,
        })?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Brute-force deviation of every dropped input point from the
    /// simplified polyline: min distance over all output segments.
    fn max_deviation_oracle(input: &[[f64; 2]], output: &[[f64; 2]]) -> f64 {
        let mut worst = 0.0f64;
        for p in input {
            if output.iter().any(|q| q == p) {
                continue;
            }
            let mut best = f64::INFINITY;
            if output.len() == 1 {
                best = seg_distance(*p, output[0], output[0]);
            }
            for seg in output.windows(2) {
                best = best.min(seg_distance(*p, seg[0], seg[1]));
            }
            worst = worst.max(best);
        }
        worst
    }

    fn is_subsequence(sub: &[[f64; 2]], full: &[[f64; 2]]) -> bool {
        let mut it = full.iter();
        sub.iter().all(|p| it.any(|q| q == p))
    }

    #[test]
    fn rdp_drops_collinear_interior() {
        let out = rdp_simplify(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.5);
        assert_eq!(out, vec![[0.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn rdp_single_point_unchanged() {
        let out = rdp_simplify(&[[0.0, 0.0]], 2.0);
        assert_eq!(out, vec![[0.0, 0.0]]);
    }

    #[test]
    fn rdp_keeps_large_deviation() {
        let out = rdp_simplify(&[[0.0, 0.0], [1.0, 5.0], [2.0, 0.0]], 0.5);
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn rdp_oracle_random_polylines() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = 50;
            let mut pts = Vec::with_capacity(n);
            let mut p = [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)];
            for _ in 0..n {
                p = [
                    p[0] + rng.random_range(-6.0..6.0),
                    p[1] + rng.random_range(-6.0..6.0),
                ];
                pts.push(p);
            }
            let out = rdp_simplify(&pts, 2.0);
            assert!(is_subsequence(&out, &pts));
            assert_eq!(out[0], pts[0]);
            assert_eq!(*out.last().unwrap(), *pts.last().unwrap());
            let dev = max_deviation_oracle(&pts, &out);
            assert!(dev <= 2.0, "oracle deviation {dev} > epsilon");
        }
    }

    #[test]
    fn rdp_oracle_long_polyline() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let pts: Vec<[f64; 2]> = (0..200)
            .map(|i| {
                [
                    i as f64 + rng.random_range(-1.0..1.0),
                    (i as f64 * 0.2).sin() * 10.0 + rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let out = rdp_simplify(&pts, 2.0);
        assert!(is_subsequence(&out, &pts));
        assert!(max_deviation_oracle(&pts, &out) <= 2.0);
        assert!(out.len() < pts.len());
    }

    #[test]
    fn normalize_example_bbox() {
        let rec = CharacterRecord::new(
            "w",
            "c",
            vec![vec![[0.0, 0.0], [200.0, 100.0]]],
        );
        let (norm, degenerate) = normalize_character(&rec).unwrap();
        assert!(!degenerate);
        let bb = norm.bbox().unwrap();
        assert!((bb[0] - 0.0).abs() < 1e-12);
        assert!((bb[1] - 0.25).abs() < 1e-12);
        assert!((bb[2] - 1.0).abs() < 1e-12);
        assert!((bb[3] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn normalize_idempotent_and_degenerate() {
        let rec = CharacterRecord::new("w", "c", vec![vec![[0.0, 0.0], [1.0, 1.0]]]);
        let (n1, _) = normalize_character(&rec).unwrap();
        let (n2, _) = normalize_character(&n1).unwrap();
        assert_eq!(n1, n2);

        let point = CharacterRecord::new("w", "c", vec![vec![[3.0, 4.0]]]);
        let (n, degenerate) = normalize_character(&point).unwrap();
        assert!(degenerate);
        assert_eq!(n.strokes[0][0], [0.5, 0.5]);
    }

    #[test]
    fn offsets_example() {
        let rec = CharacterRecord::new(
            "w",
            "c",
            vec![
                vec![[0.0, 0.0], [1.0, 0.0]],
                vec![[1.0, 1.0], [2.0, 1.0]],
            ],
        );
        let ch = to_offsets(&rec).unwrap();
        let rows: Vec<(f64, f64, PenState)> =
            ch.points.iter().map(|p| (p.du, p.dv, p.state)).collect();
        assert_eq!(
            rows,
            vec![
                (0.0, 0.0, PenState::Down),
                (1.0, 0.0, PenState::Up),
                (0.0, 1.0, PenState::Down),
                (1.0, 0.0, PenState::End),
            ]
        );
    }

    #[test]
    fn offsets_single_point() {
        let rec = CharacterRecord::new("w", "c", vec![vec![[0.2, 0.3]]]);
        let ch = to_offsets(&rec).unwrap();
        assert_eq!(ch.points.len(), 1);
        assert_eq!(ch.points[0].state, PenState::End);
        assert!((ch.points[0].du - 0.2).abs() < 1e-15);
    }

    #[test]
    fn absolute_ignores_padding() {
        let ch = OnlineCharacter::new(vec![
            TrajectoryPoint::new(0.1, 0.2, PenState::End),
            TrajectoryPoint::padding(),
            TrajectoryPoint::padding(),
        ]);
        let strokes = to_absolute(&ch);
        assert_eq!(strokes.len(), 1);
        assert_eq!(strokes[0].len(), 1);
    }

    #[test]
    fn pad_examples() {
        let ch = OnlineCharacter::new(vec![
            TrajectoryPoint::new(0.1, 0.0, PenState::Down),
            TrajectoryPoint::new(0.1, 0.0, PenState::Down),
            TrajectoryPoint::new(0.1, 0.0, PenState::End),
        ]);
        let padded = pad_to_length(&ch, 5).unwrap();
        assert_eq!(padded.len(), 5);
        assert_eq!(padded.points[..3], ch.points[..]);
        assert_eq!(padded.points[3], TrajectoryPoint::padding());
        assert_eq!(padded.points[4], TrajectoryPoint::padding());
        assert_eq!(padded.real_len(), 3);
        assert!(padded.check_invariants());

        let same = pad_to_length(&ch, 3).unwrap();
        assert_eq!(same, ch);

        assert!(matches!(
            pad_to_length(&ch, 2),
            Err(TrajectoryError::TooLong { len: 3, max: 2 })
        ));
    }

    fn random_record(rng: &mut ChaCha12Rng) -> CharacterRecord {
        let n_strokes = rng.random_range(1..4);
        let strokes = (0..n_strokes)
            .map(|_| {
                let n = rng.random_range(1..8);
                (0..n)
                    .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                    .collect()
            })
            .collect();
        CharacterRecord::new("w", "c", strokes)
    }

    #[test]
    fn offsets_roundtrip_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let rec = random_record(&mut rng);
            let ch = to_offsets(&rec).unwrap();
            let back = to_absolute(&ch);
            assert_eq!(back.len(), rec.strokes.len(), "stroke segmentation");
            for (s1, s2) in back.iter().zip(rec.strokes.iter()) {
                assert_eq!(s1.len(), s2.len());
                for (p1, p2) in s1.iter().zip(s2.iter()) {
                    assert!((p1[0] - p2[0]).abs() < 1e-9);
                    assert!((p1[1] - p2[1]).abs() < 1e-9);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_preserves_aspect(pts in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 2..40)) {
            let stroke: Polyline = pts.iter().map(|&(x, y)| [x, y]).collect();
            let rec = CharacterRecord::new("w", "c", vec![stroke]);
            let bb = rec.bbox().unwrap();
            let (w0, h0) = (bb[2] - bb[0], bb[3] - bb[1]);
            prop_assume!(w0 > 1e-9 && h0 > 1e-9);
            let (norm, degenerate) = normalize_character(&rec).unwrap();
            prop_assert!(!degenerate);
            let nb = norm.bbox().unwrap();
            let (w1, h1) = (nb[2] - nb[0], nb[3] - nb[1]);
            prop_assert!((w0 / h0 - w1 / h1).abs() < 1e-9);
            prop_assert!((w1.max(h1) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pad_never_mutates_prefix(n in 1usize..10, extra in 0usize..10) {
            let mut points: Vec<TrajectoryPoint> = (0..n)
                .map(|i| TrajectoryPoint::new(i as f64 * 0.1, 0.05, PenState::Down))
                .collect();
            points.last_mut().unwrap().state = PenState::End;
            let ch = OnlineCharacter::new(points);
            let padded = pad_to_length(&ch, n + extra).unwrap();
            prop_assert_eq!(&padded.points[..n], &ch.points[..]);
            prop_assert!(padded.points[n..].iter().all(|p| *p == TrajectoryPoint::padding()));
        }
    }

    #[test]
    fn render_horizontal_stroke_single_row() {
        let rec = CharacterRecord::new("w", "c", vec![vec![[0.0, 0.5], [1.0, 0.5]]]);
        let ch = to_offsets(&rec).unwrap();
        let img = render_offline(&ch, 32);
        let lit_rows: std::collections::BTreeSet<usize> = (0..32)
            .filter(|&y| (0..32).any(|x| img.get(x, y) > 0))
            .collect();
        assert_eq!(lit_rows.len(), 1);
    }

    #[test]
    fn render_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let rec = random_record(&mut rng);
        let (norm, _) = normalize_character(&rec).unwrap();
        let ch = to_offsets(&norm).unwrap();
        let a = render_offline(&ch, 64);
        let b = render_offline(&ch, 64);
        assert_eq!(a, b);
    }

    #[test]
    fn render_no_ink_between_strokes() {
        let rec = CharacterRecord::new(
            "w",
            "c",
            vec![
                vec![[0.0, 0.0], [0.2, 0.0]],
                vec![[0.8, 0.0], [1.0, 0.0]],
            ],
        );
        let (norm, _) = normalize_character(&rec).unwrap();
        let ch = to_offsets(&norm).unwrap();
        let img = render_offline(&ch, 64);
        // y of the single lit row
        let y = (0..64)
            .find(|&y| (0..64).any(|x| img.get(x, y) > 0))
            .unwrap();
        let span = (64 - 1 - 2 * RENDER_MARGIN) as f64;
        let x_gap_lo = (RENDER_MARGIN as f64 + 0.3 * span) as usize;
        let x_gap_hi = (RENDER_MARGIN as f64 + 0.7 * span) as usize;
        for x in x_gap_lo..=x_gap_hi {
            assert_eq!(img.get(x, y), 0, "ink at x={x} inside pen-up gap");
        }
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join(format!("traj_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.jsonl");

        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let records: Vec<CharacterRecord> = (0..20).map(|_| random_record(&mut rng)).collect();
        write_dataset(&records, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, records);

        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());

        std::fs::write(&path, "{\"writer_id\":\"w\",\"label\":\"c\",\"strokes\":[[[0,0]]]}\n{\"writer_id\":\"w\"}\n").unwrap();
        match read_dataset(&path) {
            Err(TrajectoryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
