//! Supervision oracle: exact image-method multi-bounce ray tracing in an
//! empty rectangular room, plus deterministic dataset sampling.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{Dataset, QuerySample, SampleSplit};
use crate::error::{CkmError, Result};
use crate::renderer::{
    gain_db_plain, spectrum_plain, steering_vector, wavelength, ArrayGeometry,
};
use crate::vec3::{self, Vec3};

/// Walls are indexed axis-major: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
pub const WALL_COUNT: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub extents: Vec3,
    pub reflections: [f64; WALL_COUNT],
    pub max_bounce: usize,
}

impl RoomSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            extents: cfg.room.extents,
            reflections: [cfg.room.reflection; WALL_COUNT],
            max_bounce: cfg.room.max_bounce,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] > 0.0 && p[i] < self.extents[i])
    }

    fn wall_plane(&self, wall: usize) -> (usize, f64) {
        let axis = wall / 2;
        let coord = if wall % 2 == 0 { 0.0 } else { self.extents[axis] };
        (axis, coord)
    }

    fn reflect(&self, p: Vec3, wall: usize) -> Vec3 {
        let (axis, plane) = self.wall_plane(wall);
        let mut out = p;
        out[axis] = 2.0 * plane - p[axis];
        out
    }
}

/// A mirrored source: image point, cumulative reflection coefficient and the
/// wall sequence that produced it.
#[derive(Debug, Clone)]
pub struct ImageSource {
    pub point: Vec3,
    pub coeff: f64,
    pub walls: Vec<u8>,
}

/// All wall sequences of order exactly `n` without immediate same-wall
/// repeats; commuting sequences are kept (see [`mirror_images`] for the
/// pruned set).
pub fn mirror_images_raw(p: Vec3, room: &RoomSpec, n: usize) -> Vec<ImageSource> {
    let mut level = vec![ImageSource { point: p, coeff: 1.0, walls: Vec::new() }];
    for _ in 0..n {
        let mut next = Vec::with_capacity(level.len() * (WALL_COUNT - 1));
        for src in &level {
            for wall in 0..WALL_COUNT {
                if src.walls.last() == Some(&(wall as u8)) {
                    continue;
                }
                let mut walls = src.walls.clone();
                walls.push(wall as u8);
                next.push(ImageSource {
                    point: room.reflect(src.point, wall),
                    coeff: src.coeff * room.reflections[wall],
                    walls,
                });
            }
        }
        level = next;
    }
    level
}

/// Distinct image sources of order exactly `n`: commuting wall orders map to
/// the same mirrored point and would double-count a single specular path, so
/// duplicates are pruned (first sequence in lexicographic order wins).
pub fn mirror_images(p: Vec3, room: &RoomSpec, n: usize) -> Vec<ImageSource> {
    let raw = mirror_images_raw(p, room, n);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for src in raw {
        let key = (
            (src.point[0] * 1e9).round() as i64,
            (src.point[1] * 1e9).round() as i64,
            (src.point[2] * 1e9).round() as i64,
        );
        if seen.insert(key) {
            out.push(src);
        }
    }
    out
}

/// Exact multi-bounce channel: per-order components (index 0 = direct path)
/// and their sum.
pub fn trace_channel(
    p_tx: Vec3,
    p_rx: Vec3,
    f_hz: f64,
    room: &RoomSpec,
    geom: &ArrayGeometry,
) -> Result<(Vec<Complex64>, Vec<Vec<Complex64>>)> {
    if !room.contains(p_tx) || !room.contains(p_rx) {
        return Err(CkmError::Domain("trace endpoints must lie strictly inside the room".into()));
    }
    let lambda = wavelength(f_hz);
    let n_a = geom.len();
    let mut per_order = Vec::with_capacity(room.max_bounce + 1);
    let mut total = vec![Complex64::new(0.0, 0.0); n_a];
    for n in 0..=room.max_bounce {
        let mut h_n = vec![Complex64::new(0.0, 0.0); n_a];
        for img in mirror_images(p_tx, room, n) {
            let d = vec3::dist(img.point, p_rx);
            let amp = img.coeff * lambda / (4.0 * std::f64::consts::PI * d);
            let phase = Complex64::from_polar(amp, -2.0 * std::f64::consts::PI / lambda * d);
            let dir = vec3::normalize(vec3::sub(img.point, p_rx));
            let b = steering_vector(dir, geom, lambda);
            for (acc, bk) in h_n.iter_mut().zip(&b) {
                *acc += phase * bk;
            }
        }
        for (t, hk) in total.iter_mut().zip(&h_n) {
            *t += hk;
        }
        per_order.push(h_n);
    }
    Ok((total, per_order))
}

fn sample_seed(master: u64, index: u64) -> u64 {
    master ^ index.wrapping_mul(0x9E3779B97F4A7C15).rotate_left(17)
}

/// Frequencies assigned per sample: explicit per-frequency counts or
/// round-robin over the configured list.
fn assign_frequencies(total: usize, freqs: &[f64], counts: &Option<Vec<usize>>) -> Result<Vec<f64>> {
    match counts {
        Some(c) => {
            if c.iter().sum::<usize>() != total {
                return Err(CkmError::Config(format!(
                    "per-frequency counts sum to {} but {} samples requested",
                    c.iter().sum::<usize>(),
                    total
                )));
            }
            let mut out = Vec::with_capacity(total);
            for (f, &k) in freqs.iter().zip(c) {
                out.extend(std::iter::repeat(*f).take(k));
            }
            Ok(out)
        }
        None => Ok((0..total).map(|i| freqs[i % freqs.len()]).collect()),
    }
}

fn draw_sample(
    room: &RoomSpec,
    f_ghz: f64,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<QuerySample> {
    let f_hz = f_ghz * 1e9;
    let lambda = wavelength(f_hz);
    let ext = room.extents;
    let wall_margin = |p: Vec3| -> f64 {
        (0..3).map(|i| p[i].min(ext[i] - p[i])).fold(f64::INFINITY, f64::min)
    };
    let mut found = None;
    for _ in 0..100_000 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec3 {
            [
                rng.gen_range(0.0..ext[0]),
                rng.gen_range(0.0..ext[1]),
                rng.gen_range(0.0..ext[2]),
            ]
        };
        let p_tx = draw(rng);
        let p_rx = draw(rng);
        if wall_margin(p_tx) < lambda || wall_margin(p_rx) < lambda {
            continue;
        }
        if vec3::dist(p_tx, p_rx) < lambda {
            continue;
        }
        found = Some((p_tx, p_rx));
        break;
    }
    let (p_tx, p_rx) = found.ok_or_else(|| {
        CkmError::Config(format!(
            "rejection sampling failed: room too small for wavelength {lambda:.4} m"
        ))
    })?;

    let geom = ArrayGeometry::planar(cfg.array.rows, cfg.array.cols, lambda);
    let (h, per_order) = trace_channel(p_tx, p_rx, f_hz, room, &geom)?;
    let spectrum: Vec<f32> =
        spectrum_plain(&h, &geom, lambda, cfg.grid.elevation_bins, cfg.grid.azimuth_bins)
            .into_iter()
            .map(|v| v as f32)
            .collect();
    let order_gains_db = if cfg.dataset.store_order_gains {
        Some(per_order.iter().map(|hn| gain_db_plain(hn)).collect())
    } else {
        None
    };
    Ok(QuerySample {
        split: SampleSplit::Train,
        p_tx,
        p_rx,
        freq_hz: f_hz,
        gain_db: gain_db_plain(&h),
        spectrum,
        order_gains_db,
    })
}

/// Deterministic dataset generation; every sample derives its own RNG stream
/// from the master seed, so results are independent of scheduling.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let room = RoomSpec::from_config(cfg);
    let freqs_train = assign_frequencies(
        cfg.dataset.train_samples,
        &cfg.dataset.frequencies_ghz,
        &cfg.dataset.train_counts_per_freq,
    )?;
    let freqs_test = assign_frequencies(
        cfg.dataset.test_samples,
        &cfg.dataset.frequencies_ghz,
        &cfg.dataset.test_counts_per_freq,
    )?;

    let specs: Vec<(SampleSplit, f64, u64)> = freqs_train
        .iter()
        .enumerate()
        .map(|(i, &f)| (SampleSplit::Train, f, sample_seed(cfg.seed, i as u64)))
        .chain(freqs_test.iter().enumerate().map(|(i, &f)| {
            (SampleSplit::Test, f, sample_seed(cfg.seed, (i + freqs_train.len()) as u64))
        }))
        .collect();

    let worker = |spec: &(SampleSplit, f64, u64)| -> Result<QuerySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.2);
        let mut s = draw_sample(&room, spec.1, cfg, &mut rng)?;
        s.split = spec.0;
        Ok(s)
    };

    let threads = cfg.threads.max(1);
    let samples: Vec<QuerySample> = if threads <= 1 || specs.len() < 2 {
        specs.iter().map(worker).collect::<Result<_>>()?
    } else {
        let chunk = specs.len().div_ceil(threads);
        let mut out: Vec<Option<QuerySample>> = vec![None; specs.len()];
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for (ci, chunk_specs) in specs.chunks(chunk).enumerate() {
                let h = scope.spawn(move || -> Result<Vec<QuerySample>> {
                    chunk_specs.iter().map(worker).collect()
                });
                handles.push((ci, h));
            }
            for (ci, h) in handles {
                let produced = h.join().expect("worker thread panicked")?;
                for (i, s) in produced.into_iter().enumerate() {
                    out[ci * chunk + i] = Some(s);
                }
            }
            Ok(())
        })?;
        out.into_iter().map(|s| s.expect("all samples produced")).collect()
    };

    Ok(Dataset {
        v_bins: cfg.grid.elevation_bins,
        z_bins: cfg.grid.azimuth_bins,
        array_rows: cfg.array.rows,
        array_cols: cfg.array.cols,
        room,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> RoomSpec {
        RoomSpec { extents: [4.0, 3.0, 2.5], reflections: [0.6; 6], max_bounce: 3 }
    }

    #[test]
    fn zero_order_is_the_source_itself() {
        let imgs = mirror_images([1.0, 1.0, 1.0], &room(), 0);
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].point, [1.0, 1.0, 1.0]);
        assert_eq!(imgs[0].coeff, 1.0);
    }

    #[test]
    fn first_order_has_six_images_including_floor_mirror() {
        let imgs = mirror_images([1.0, 1.0, 1.0], &room(), 1);
        assert_eq!(imgs.len(), 6);
        // floor z = 0 flips the z coordinate
        assert!(imgs.iter().any(|i| i.point == [1.0, 1.0, -1.0]));
    }

    #[test]
    fn sequence_counts_match_combinatorics() {
        let p = [1.0, 1.3, 0.9];
        for n in 1..=3usize {
            let raw = mirror_images_raw(p, &room(), n);
            assert_eq!(raw.len(), 6 * 5usize.pow(n as u32 - 1));
        }
        // order 2: 24 commuting cross-axis pairs collapse to 12 points
        let pruned = mirror_images(p, &room(), 2);
        assert_eq!(pruned.len(), 18);
    }

    #[test]
    fn first_order_floor_path_length() {
        // image of Tx=(1,1,1) in the floor is (1,1,-1); distance to Rx=(2,1,1)
        // is sqrt(1 + 4) = sqrt(5)
        let imgs = mirror_images([1.0, 1.0, 1.0], &room(), 1);
        let floor = imgs.iter().find(|i| i.point == [1.0, 1.0, -1.0]).unwrap();
        let d = vec3::dist(floor.point, [2.0, 1.0, 1.0]);
        assert!((d - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_reflection_reduces_to_direct_path() {
        let mut r = room();
        r.reflections = [0.0; 6];
        let lambda = wavelength(6e9);
        let geom = ArrayGeometry::planar(4, 4, lambda);
        let (total, per_order) =
            trace_channel([1.0, 1.0, 1.0], [2.0, 1.5, 1.2], 6e9, &r, &geom).unwrap();
        for (t, d) in total.iter().zip(&per_order[0]) {
            assert!((t - d).norm() < 1e-18);
        }
        for hn in &per_order[1..] {
            assert!(hn.iter().all(|v| v.norm() == 0.0));
        }
    }

    #[test]
    fn direct_path_matches_free_space_closed_form() {
        let mut r = room();
        r.max_bounce = 0;
        r.extents = [10.0, 10.0, 10.0];
        let f = 6e9;
        let lambda = wavelength(f);
        let geom = ArrayGeometry::planar(4, 4, lambda);
        let (h, _) = trace_channel([4.0, 5.0, 5.0], [5.0, 5.0, 5.0], f, &r, &geom).unwrap();
        let expected = 10.0 * (16.0 * (lambda / (4.0 * std::f64::consts::PI)).powi(2)).log10();
        assert!((gain_db_plain(&h) - expected).abs() < 1e-9);
    }

    #[test]
    fn oracle_energy_decays_with_order() {
        let r = room();
        let lambda = wavelength(6e9);
        let geom = ArrayGeometry::planar(4, 4, lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut energies = vec![0.0; r.max_bounce + 1];
        for _ in 0..24 {
            let p_tx = [
                rng.gen_range(0.3..3.7),
                rng.gen_range(0.3..2.7),
                rng.gen_range(0.3..2.2),
            ];
            let p_rx = [
                rng.gen_range(0.3..3.7),
                rng.gen_range(0.3..2.7),
                rng.gen_range(0.3..2.2),
            ];
            if vec3::dist(p_tx, p_rx) < 0.3 {
                continue;
            }
            let (_, per_order) = trace_channel(p_tx, p_rx, 6e9, &r, &geom).unwrap();
            for (n, hn) in per_order.iter().enumerate() {
                energies[n] += hn.iter().map(|v| v.norm_sqr()).sum::<f64>();
            }
        }
        for w in energies.windows(2) {
            assert!(w[1] <= w[0], "mean order energy must not grow: {energies:?}");
        }
    }

    #[test]
    fn generation_is_seed_deterministic_and_respects_margins() {
        let mut cfg = RunConfig::default();
        cfg.dataset.train_samples = 6;
        cfg.dataset.test_samples = 2;
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            let lambda = wavelength(s.freq_hz);
            let ext = cfg.room.extents;
            for p in [s.p_tx, s.p_rx] {
                for i in 0..3 {
                    assert!(p[i] >= lambda && ext[i] - p[i] >= lambda);
                }
            }
            assert!(vec3::dist(s.p_tx, s.p_rx) >= lambda);
        }
    }

    #[test]
    fn threaded_generation_matches_sequential() {
        let mut cfg = RunConfig::default();
        cfg.dataset.train_samples = 5;
        cfg.dataset.test_samples = 3;
        let seq = generate_dataset(&cfg).unwrap();
        cfg.threads = 4;
        let par = generate_dataset(&cfg).unwrap();
        assert_eq!(seq, par);
    }
}
