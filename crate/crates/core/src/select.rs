//! Second-stage histogram classifier: reduces a dense ray profile plus
//! predicted EPWs to at most three realistic scan points per ray.
//!
//! Echo counts are drawn from a fitted occurrence table over (yaw bin, class);
//! within each kept cluster the representative sample is scored by an
//! offset prior times the Gaussian likelihood of its predicted EPW under the
//! lookup-table statistics.

use crate::bin;
use crate::lut::{bin_of, EpwLut, Moments};
use crate::net::{pgm_to_input, EpwNetwork};
use crate::pgm::{encode_dense, ScanFrame, ScanPoint, SensorSpec};
use crate::real::Real;
use crate::scene::{cluster_ranges, majority_label, ClassLabel, DenseFrame};
use crate::{seed, Error, Result};
use rand::Rng;
use std::io::{Read, Write};

const N_CLASSES: usize = 6;
/// Echo multiplicities 0..=3.
const N_K: usize = 4;
/// Gaussian likelihood floor keeps sparse bins from degenerating.
const EPW_STD_FLOOR: f64 = 0.25;

/// Bin layout of the occurrence and offset histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct EchoHistBins<T: Real> {
    pub yaw_edges: Vec<T>,
    pub distance_edges: Vec<T>,
    pub offset_edges: Vec<T>,
}

impl<T: Real> EchoHistBins<T> {
    /// Defaults: 5 degree yaw bins over the FOV, 5 m distance bins over the
    /// range, 0.25 m offset bins up to 2 m.
    pub fn default_for(spec: &SensorSpec<T>) -> Self {
        let steps = |lo: f64, hi: f64, step: f64| -> Vec<T> {
            let n = ((hi - lo) / step).round() as usize;
            (0..=n).map(|i| T::of(lo + step * i as f64)).collect()
        };
        Self {
            yaw_edges: steps(spec.h_fov[0].as_f64(), spec.h_fov[1].as_f64(), 5.0),
            distance_edges: steps(0.0, spec.max_range.as_f64(), 5.0),
            offset_edges: steps(0.0, 2.0, 0.25),
        }
    }

    fn validate(&self) -> Result<()> {
        for (edges, what) in [
            (&self.yaw_edges, "yaw"),
            (&self.distance_edges, "distance"),
            (&self.offset_edges, "offset"),
        ] {
            if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!("{what} edges must be strictly ascending")));
            }
        }
        Ok(())
    }

    fn n_yaw(&self) -> usize {
        self.yaw_edges.len() - 1
    }

    fn n_dist(&self) -> usize {
        self.distance_edges.len() - 1
    }

    fn n_off(&self) -> usize {
        self.offset_edges.len() - 1
    }
}

/// Fitted echo-occurrence probabilities P(k | yaw bin, class) and the
/// selected-sample offset distribution per distance bin.
#[derive(Clone, Debug, PartialEq)]
pub struct EchoOccurrenceHist<T: Real> {
    bins: EchoHistBins<T>,
    /// `[yaw_bin][class][k]`, rows sum to 1.
    k_prob: Vec<T>,
    /// `[dist_bin][offset_bin]`, rows sum to 1.
    offset_prob: Vec<T>,
}

impl<T: Real> EchoOccurrenceHist<T> {
    pub fn bins(&self) -> &EchoHistBins<T> {
        &self.bins
    }

    fn k_row(&self, yaw_bin: usize, class: ClassLabel) -> &[T] {
        let i = (yaw_bin * N_CLASSES + class.code() as usize) * N_K;
        &self.k_prob[i..i + N_K]
    }

    fn offset_row(&self, dist_bin: usize) -> &[T] {
        let i = dist_bin * self.bins.n_off();
        &self.offset_prob[i..i + self.bins.n_off()]
    }

    /// P(k | yaw angle, class) for k in 0..=3.
    pub fn k_distribution(&self, yaw_deg: T, class: ClassLabel) -> Result<[T; 4]> {
        let yb = bin_of(&self.bins.yaw_edges, yaw_deg)
            .ok_or_else(|| Error::Range(format!("yaw {yaw_deg} outside histogram")))?;
        let row = self.k_row(yb, class);
        Ok([row[0], row[1], row[2], row[3]])
    }
}

/// Fit occurrence and offset histograms from paired ground truth.
pub fn fit_echo_hist<T: Real>(
    truth: &[(DenseFrame<T>, ScanFrame<T>)],
    bins: &EchoHistBins<T>,
    spec: &SensorSpec<T>,
    cluster_gap: T,
) -> Result<EchoOccurrenceHist<T>> {
    bins.validate()?;
    if truth.is_empty() {
        return Err(Error::Fit("empty truth set".into()));
    }
    let (n_yaw, n_dist, n_off) = (bins.n_yaw(), bins.n_dist(), bins.n_off());
    let mut k_counts = vec![0u64; n_yaw * N_CLASSES * N_K];
    let mut off_counts = vec![0u64; n_dist * n_off];

    for (dense, scan) in truth {
        // Echo multiplicity per ray from the scan side.
        let mut multiplicity = std::collections::BTreeMap::<(u8, u16), u8>::new();
        for p in &scan.points {
            let e = multiplicity.entry((p.layer, p.az)).or_insert(0);
            *e = (*e).max(p.echo + 1);
        }
        for ray in &dense.rays {
            if ray.samples.is_empty() {
                continue;
            }
            let dists: Vec<T> = ray.samples.iter().map(|s| s.distance).collect();
            let clusters = cluster_ranges(&dists, cluster_gap);
            let leading =
                majority_label(ray.samples[clusters[0].clone()].iter().map(|s| s.class));
            let (yaw, _) = spec.cell_to_angle(ray.layer as usize, ray.az as usize);
            let yb = bin_of(&bins.yaw_edges, yaw)
                .ok_or_else(|| Error::Data(format!("yaw {yaw} outside histogram")))?;
            let k = (*multiplicity.get(&(ray.layer, ray.az)).unwrap_or(&0)).min(3) as usize;
            k_counts[(yb * N_CLASSES + leading.code() as usize) * N_K + k] += 1;

            // Offsets of the selected (ground-truth) echoes within their clusters.
            for p in scan.points.iter().filter(|p| p.layer == ray.layer && p.az == ray.az) {
                let Some(range) = clusters.get(p.echo as usize) else { continue };
                let cmin = dists[range.start];
                let offset = p.distance - cmin;
                if offset < T::zero() {
                    continue;
                }
                let db = bin_of(&bins.distance_edges, cmin)
                    .ok_or_else(|| Error::Data(format!("distance {cmin} outside histogram")))?;
                let ob = bin_of(&bins.offset_edges, offset).unwrap_or(n_off - 1);
                off_counts[db * n_off + ob] += 1;
            }
        }
    }

    // Normalize; untouched rows fall back to the uniform distribution.
    let mut k_prob = vec![T::zero(); k_counts.len()];
    for row in 0..n_yaw * N_CLASSES {
        let counts = &k_counts[row * N_K..(row + 1) * N_K];
        let total: u64 = counts.iter().sum();
        for k in 0..N_K {
            k_prob[row * N_K + k] = if total == 0 {
                T::of(1.0 / N_K as f64)
            } else {
                T::of(counts[k] as f64 / total as f64)
            };
        }
    }
    let mut offset_prob = vec![T::zero(); off_counts.len()];
    for row in 0..n_dist {
        let counts = &off_counts[row * n_off..(row + 1) * n_off];
        let total: u64 = counts.iter().sum();
        for o in 0..n_off {
            offset_prob[row * n_off + o] = if total == 0 {
                T::of(1.0 / n_off as f64)
            } else {
                T::of(counts[o] as f64 / total as f64)
            };
        }
    }
    Ok(EchoOccurrenceHist { bins: bins.clone(), k_prob, offset_prob })
}

/// How the selection stage resolves its random choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    Argmax,
    Sample,
}

#[derive(Clone, Copy, Debug)]
pub struct SelectionConfig<T: Real> {
    pub cluster_gap: T,
    pub mode: SelectionMode,
    pub seed: u64,
}

impl<T: Real> Default for SelectionConfig<T> {
    fn default() -> Self {
        Self {
            cluster_gap: T::of(crate::scene::DEFAULT_CLUSTER_GAP_M),
            mode: SelectionMode::Argmax,
            seed: 0,
        }
    }
}

impl<T: Real> SelectionConfig<T> {
    fn validate(&self) -> Result<()> {
        if self.cluster_gap <= T::zero() {
            return Err(Error::Config("cluster gap must be > 0".into()));
        }
        Ok(())
    }
}

/// One dense sample as seen by the selector: geometry plus its predicted EPW.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictedSample<T: Real> {
    pub distance: T,
    pub class: ClassLabel,
    pub epw: T,
}

fn gaussian_likelihood<T: Real>(x: T, m: &Moments<T>) -> T {
    if m.count == 0 {
        return T::one();
    }
    let std = m.sampling_std().max(T::of(EPW_STD_FLOOR));
    let z = (x - m.mean) / std;
    (-z * z / T::of(2.0)).exp() / std
}

fn pick_k<T: Real, R: Rng>(probs: &[T], mode: SelectionMode, rng: Option<&mut R>) -> Result<usize> {
    match mode {
        SelectionMode::Argmax => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SelectionMode::Sample => {
            let rng = rng.ok_or_else(|| Error::Config("Sample mode needs an RNG".into()))?;
            let u = T::of(rng.gen::<f64>());
            let mut acc = T::zero();
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(probs.len() - 1)
        }
    }
}

/// Select up to three echoes from one ray's predicted dense samples.
///
/// Samples must be sorted by ascending distance. Deterministic in Argmax
/// mode; Sample mode draws from the ray RNG.
#[allow(clippy::too_many_arguments)]
pub fn select_echoes<T: Real, R: Rng>(
    layer: u8,
    az: u16,
    samples: &[PredictedSample<T>],
    hist: &EchoOccurrenceHist<T>,
    lut: &EpwLut<T>,
    spec: &SensorSpec<T>,
    cfg: &SelectionConfig<T>,
    mut rng: Option<&mut R>,
) -> Result<Vec<ScanPoint<T>>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    if samples.windows(2).any(|w| w[1].distance < w[0].distance) {
        return Err(Error::Data("samples must be sorted by distance".into()));
    }
    let dists: Vec<T> = samples.iter().map(|s| s.distance).collect();
    let clusters = cluster_ranges(&dists, cfg.cluster_gap);
    let leading = majority_label(samples[clusters[0].clone()].iter().map(|s| s.class));
    let (yaw, _) = spec.cell_to_angle(layer as usize, az as usize);
    let k_probs = hist.k_distribution(yaw, leading)?;
    let k = pick_k(&k_probs, cfg.mode, rng.as_deref_mut())?;
    let k = k.min(clusters.len()).min(3);

    let mut points = Vec::with_capacity(k);
    for (echo, range) in clusters.iter().take(k).enumerate() {
        let cluster = &samples[range.clone()];
        let cmin = cluster[0].distance;
        let class = majority_label(cluster.iter().map(|s| s.class));
        let db = bin_of(&hist.bins.distance_edges, cmin)
            .ok_or_else(|| Error::Range(format!("distance {cmin} outside histogram")))?;
        let offset_row = hist.offset_row(db);
        let moments = lut.bin_moments_with_fallback(class, echo as u8, layer as usize, cmin, yaw)?;
        let scores: Vec<T> = cluster
            .iter()
            .map(|s| {
                let ob = bin_of(&hist.bins.offset_edges, s.distance - cmin)
                    .unwrap_or(hist.bins.n_off() - 1);
                let prior = offset_row[ob];
                let lik = moments.as_ref().map_or(T::one(), |m| gaussian_likelihood(s.epw, m));
                prior * lik
            })
            .collect();
        let total: T = scores.iter().copied().sum();
        let chosen = if total <= T::zero() {
            0
        } else {
            match cfg.mode {
                SelectionMode::Argmax => {
                    let mut best = 0;
                    for (i, &s) in scores.iter().enumerate() {
                        if s > scores[best] {
                            best = i;
                        }
                    }
                    best
                }
                SelectionMode::Sample => {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::Config("Sample mode needs an RNG".into()))?;
                    let u = T::of(rng.gen::<f64>()) * total;
                    let mut acc = T::zero();
                    let mut pick = scores.len() - 1;
                    for (i, &s) in scores.iter().enumerate() {
                        acc += s;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            }
        };
        let s = cluster[chosen];
        points.push(ScanPoint {
            layer,
            az,
            echo: echo as u8,
            distance: s.distance,
            epw: s.epw,
            class,
        });
    }
    Ok(points)
}

/// EPW prediction source for the full pipeline.
pub enum EpwBackend<'a, T: Real> {
    /// One network per echo index.
    Network(&'a [EpwNetwork<T>]),
    Lut(&'a EpwLut<T>),
}

/// Full two-stage sensor model: EPW prediction then per-ray echo selection.
/// Sample-mode RNG streams derive from (seed, frame, layer, az), so results
/// do not depend on scheduling.
pub fn apply_model<T: Real>(
    frame: &DenseFrame<T>,
    backend: &EpwBackend<'_, T>,
    hist: &EchoOccurrenceHist<T>,
    lut: &EpwLut<T>,
    spec: &SensorSpec<T>,
    cfg: &SelectionConfig<T>,
) -> Result<ScanFrame<T>> {
    spec.validate()?;
    cfg.validate()?;
    // Network backend: one forward per echo per frame.
    let net_outs = match backend {
        EpwBackend::Network(nets) => {
            let mut outs = Vec::new();
            for (echo, net) in nets.iter().enumerate().take(spec.max_echoes as usize) {
                let input = pgm_to_input(&encode_dense(frame, spec, echo as u8)?, spec)?;
                outs.push(net.forward(&input)?);
            }
            Some(outs)
        }
        EpwBackend::Lut(_) => None,
    };

    let mut points = Vec::new();
    for ray in &frame.rays {
        let dists: Vec<T> = ray.samples.iter().map(|s| s.distance).collect();
        let clusters = cluster_ranges(&dists, cfg.cluster_gap);
        let (yaw, _) = spec.cell_to_angle(ray.layer as usize, ray.az as usize);
        let mut predicted = Vec::with_capacity(ray.samples.len());
        for (ci, range) in clusters.iter().enumerate() {
            for s in &ray.samples[range.clone()] {
                let epw = match backend {
                    EpwBackend::Network(_) => {
                        let outs = net_outs.as_ref().unwrap();
                        if ci < outs.len() {
                            outs[ci].get(0, ray.layer as usize, ray.az as usize).max(T::zero())
                        } else {
                            T::zero()
                        }
                    }
                    EpwBackend::Lut(table) => table
                        .query_with_fallback::<rand_chacha::ChaCha8Rng>(
                            s.class,
                            (ci as u8).min(2),
                            ray.layer as usize,
                            s.distance,
                            yaw,
                            crate::lut::QueryMode::Mean,
                            None,
                        )?
                        .unwrap_or(T::zero()),
                };
                predicted.push(PredictedSample { distance: s.distance, class: s.class, epw });
            }
        }
        let mut rng = match cfg.mode {
            SelectionMode::Sample => {
                Some(seed::stream(cfg.seed, &[frame.frame_id, ray.layer as u64, ray.az as u64]))
            }
            SelectionMode::Argmax => None,
        };
        points.extend(select_echoes(
            ray.layer,
            ray.az,
            &predicted,
            hist,
            lut,
            spec,
            cfg,
            rng.as_mut(),
        )?);
    }
    let mut out = ScanFrame { frame_id: frame.frame_id, points };
    out.sort_canonical();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Histogram binary format: magic "EHST", version, bin edges, probability
// tables as f64 little-endian.
// ---------------------------------------------------------------------------

const EHST_MAGIC: &[u8; 4] = b"EHST";
const EHST_VERSION: u32 = 1;

pub fn write_echo_hist<T: Real, W: Write>(h: &EchoOccurrenceHist<T>, w: &mut W) -> Result<()> {
    w.write_all(EHST_MAGIC)?;
    bin::write_u32(w, EHST_VERSION)?;
    for edges in [&h.bins.yaw_edges, &h.bins.distance_edges, &h.bins.offset_edges] {
        bin::write_u32(w, edges.len() as u32)?;
        for &e in edges.iter() {
            bin::write_f64(w, e.as_f64())?;
        }
    }
    bin::write_u64(w, h.k_prob.len() as u64)?;
    for &p in &h.k_prob {
        bin::write_f64(w, p.as_f64())?;
    }
    bin::write_u64(w, h.offset_prob.len() as u64)?;
    for &p in &h.offset_prob {
        bin::write_f64(w, p.as_f64())?;
    }
    Ok(())
}

pub fn read_echo_hist<T: Real, R: Read>(r: &mut R) -> Result<EchoOccurrenceHist<T>> {
    bin::expect_magic(r, EHST_MAGIC)?;
    let version = bin::read_u32(r)?;
    if version != EHST_VERSION {
        return Err(Error::Format(format!("unsupported EHST version {version}")));
    }
    let mut edge_sets = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = bin::read_u32(r)? as usize;
        if !(2..=1_000_000).contains(&n) {
            return Err(Error::Format("implausible edge count".into()));
        }
        let mut edges = Vec::with_capacity(n);
        for _ in 0..n {
            edges.push(T::of(bin::read_f64(r)?));
        }
        edge_sets.push(edges);
    }
    let mut it = edge_sets.into_iter();
    let bins = EchoHistBins {
        yaw_edges: it.next().unwrap(),
        distance_edges: it.next().unwrap(),
        offset_edges: it.next().unwrap(),
    };
    bins.validate()?;
    let nk = bin::read_u64(r)? as usize;
    if nk != bins.n_yaw() * N_CLASSES * N_K {
        return Err(Error::Format("k-probability table size mismatch".into()));
    }
    let mut k_prob = Vec::with_capacity(nk);
    for _ in 0..nk {
        k_prob.push(T::of(bin::read_f64(r)?));
    }
    let no = bin::read_u64(r)? as usize;
    if no != bins.n_dist() * bins.n_off() {
        return Err(Error::Format("offset-probability table size mismatch".into()));
    }
    let mut offset_prob = Vec::with_capacity(no);
    for _ in 0..no {
        offset_prob.push(T::of(bin::read_f64(r)?));
    }
    Ok(EchoOccurrenceHist { bins, k_prob, offset_prob })
}

pub fn write_echo_hist_path<T: Real>(
    h: &EchoOccurrenceHist<T>,
    path: &std::path::Path,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_echo_hist(h, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_echo_hist_path<T: Real>(path: &std::path::Path) -> Result<EchoOccurrenceHist<T>> {
    read_echo_hist(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::{fit_lut, LutBins};
    use crate::pgm::random_scan_frame;
    use crate::scene::{
        build_scene, cast_rays, ground_truth_frame, BeamFootprint, CastOptions, DenseRay,
        DenseSample, Scene, SceneConfig, SceneObject,
    };
    use crate::geom::{Box3, Vec3};
    use rand_chacha::ChaCha8Rng;

    fn sample(d: f64, class: ClassLabel, epw: f64) -> DenseSample<f64> {
        DenseSample { sub: 0, distance: d, class, incidence_cos: 1.0, epw }
    }

    /// A dense ray with the given cluster head distances; all Car class.
    fn ray_with_clusters(layer: u8, az: u16, heads: &[f64]) -> DenseRay<f64> {
        let mut samples = Vec::new();
        for &h in heads {
            samples.push(sample(h, ClassLabel::Car, 10.0));
            samples.push(sample(h + 0.1, ClassLabel::Car, 10.5));
        }
        DenseRay::from_parts(layer, az, samples).unwrap()
    }

    /// Pair a dense frame with a truth frame carrying `k` echoes per ray.
    fn truth_pair(rays: Vec<(DenseRay<f64>, u8)>) -> (DenseFrame<f64>, ScanFrame<f64>) {
        let spec = SensorSpec::<f64>::desk();
        let dense = DenseFrame { frame_id: 0, rays: rays.iter().map(|r| r.0.clone()).collect() };
        let mut points = Vec::new();
        for (ray, k) in &rays {
            let truth = crate::scene::ray_echo_truth(ray, 0.5, 3);
            for (echo, t) in truth.iter().take(*k as usize).enumerate() {
                points.push(ScanPoint {
                    layer: ray.layer,
                    az: ray.az,
                    echo: echo as u8,
                    distance: t.distance,
                    epw: t.epw,
                    class: t.class,
                });
            }
        }
        let mut frame = ScanFrame { frame_id: 0, points };
        frame.sort_canonical();
        let _ = &spec;
        (dense, frame)
    }

    fn fitted_lut() -> (SensorSpec<f64>, EpwLut<f64>) {
        let spec = SensorSpec::<f64>::desk();
        let bins = LutBins::default_for(&spec).unwrap();
        let mut rng = crate::seed::rng(2);
        let frames: Vec<ScanFrame<f64>> =
            (0..4).map(|id| random_scan_frame(&spec, id, 0.05, &mut rng)).collect();
        let lut = fit_lut(&frames, &bins, &spec).unwrap();
        (spec, lut)
    }

    #[test]
    fn single_echo_rays_give_unit_probability() {
        let spec = SensorSpec::<f64>::desk();
        let bins = EchoHistBins::default_for(&spec);
        let rays: Vec<(DenseRay<f64>, u8)> =
            (0..10).map(|i| (ray_with_clusters(0, i * 3, &[10.0]), 1)).collect();
        let pair = truth_pair(rays);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let (yaw, _) = spec.cell_to_angle(0, 0);
        let p = hist.k_distribution(yaw, ClassLabel::Car).unwrap();
        assert_eq!(p, [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mixture_probabilities_match_counts() {
        let spec = SensorSpec::<f64>::desk();
        let bins = EchoHistBins::default_for(&spec);
        // Same yaw bin (adjacent columns), half one-echo, half two-echo rays.
        let mut rays = Vec::new();
        for i in 0..4u16 {
            rays.push((ray_with_clusters(0, i, &[10.0]), 1u8));
            rays.push((ray_with_clusters(0, 4 + i, &[10.0, 20.0]), 2u8));
        }
        let pair = truth_pair(rays);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let (yaw, _) = spec.cell_to_angle(0, 0);
        let p = hist.k_distribution(yaw, ClassLabel::Car).unwrap();
        assert!((p[1] - 0.5).abs() < 1e-12);
        assert!((p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn untouched_bins_are_uniform_and_rows_sum_to_one() {
        let spec = SensorSpec::<f64>::desk();
        let bins = EchoHistBins::default_for(&spec);
        let pair = truth_pair(vec![(ray_with_clusters(0, 0, &[10.0]), 1)]);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let p = hist.k_distribution(50.0, ClassLabel::Truck).unwrap();
        assert_eq!(p, [0.25; 4]);
        for yb in 0..hist.bins.n_yaw() {
            for class in ClassLabel::ALL {
                let row = hist.k_row(yb, class);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        for db in 0..hist.bins.n_dist() {
            let sum: f64 = hist.offset_row(db).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_rejects_empty_input() {
        let spec = SensorSpec::<f64>::desk();
        let bins = EchoHistBins::default_for(&spec);
        assert!(matches!(fit_echo_hist::<f64>(&[], &bins, &spec, 0.5), Err(Error::Fit(_))));
    }

    #[test]
    fn select_single_sample_forced_one_echo() {
        let (spec, lut) = fitted_lut();
        let bins = EchoHistBins::default_for(&spec);
        let pair = truth_pair(vec![(ray_with_clusters(0, 0, &[10.0]), 1)]);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let samples = [PredictedSample { distance: 12.0, class: ClassLabel::Car, epw: 9.0 }];
        let cfg = SelectionConfig::default();
        let pts = select_echoes::<f64, ChaCha8Rng>(0, 0, &samples, &hist, &lut, &spec, &cfg, None)
            .unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].distance, 12.0);
        assert_eq!(pts[0].epw, 9.0);
        assert_eq!(pts[0].echo, 0);
    }

    #[test]
    fn forced_single_echo_keeps_nearest_cluster() {
        let (spec, lut) = fitted_lut();
        let bins = EchoHistBins::default_for(&spec);
        let pair = truth_pair(vec![(ray_with_clusters(0, 0, &[10.0]), 1)]);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let samples = [
            PredictedSample { distance: 10.0, class: ClassLabel::Car, epw: 9.0 },
            PredictedSample { distance: 30.0, class: ClassLabel::Car, epw: 5.0 },
        ];
        let cfg = SelectionConfig::default();
        let pts = select_echoes::<f64, ChaCha8Rng>(0, 0, &samples, &hist, &lut, &spec, &cfg, None)
            .unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].distance, 10.0);
    }

    #[test]
    fn empty_ray_yields_no_points() {
        let (spec, lut) = fitted_lut();
        let bins = EchoHistBins::default_for(&spec);
        let pair = truth_pair(vec![(ray_with_clusters(0, 0, &[10.0]), 1)]);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let cfg = SelectionConfig::default();
        let pts =
            select_echoes::<f64, ChaCha8Rng>(0, 0, &[], &hist, &lut, &spec, &cfg, None).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn sample_mode_tracks_fitted_distribution() {
        let (spec, lut) = fitted_lut();
        let bins = EchoHistBins::default_for(&spec);
        // 20% one-echo, 50% two-echo, 30% three-echo rays in one bin.
        let mut rays = Vec::new();
        let mut az = 0u16;
        for _ in 0..2 {
            rays.push((ray_with_clusters(0, az, &[10.0]), 1u8));
            az += 1;
        }
        for _ in 0..5 {
            rays.push((ray_with_clusters(0, az, &[10.0, 20.0]), 2u8));
            az += 1;
        }
        for _ in 0..3 {
            rays.push((ray_with_clusters(0, az, &[10.0, 20.0, 30.0]), 3u8));
            az += 1;
        }
        let pair = truth_pair(rays);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let (yaw, _) = spec.cell_to_angle(0, 0);
        let expect = hist.k_distribution(yaw, ClassLabel::Car).unwrap();

        let samples = [
            PredictedSample { distance: 10.0, class: ClassLabel::Car, epw: 9.0 },
            PredictedSample { distance: 20.0, class: ClassLabel::Car, epw: 8.0 },
            PredictedSample { distance: 30.0, class: ClassLabel::Car, epw: 7.0 },
        ];
        let cfg = SelectionConfig { mode: SelectionMode::Sample, ..Default::default() };
        let n = 20_000;
        let mut counts = [0usize; 4];
        let mut rng = crate::seed::rng(7);
        for _ in 0..n {
            let pts =
                select_echoes(0, 0, &samples, &hist, &lut, &spec, &cfg, Some(&mut rng)).unwrap();
            counts[pts.len()] += 1;
        }
        let tv: f64 = (0..4)
            .map(|k| (counts[k] as f64 / n as f64 - expect[k]).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn selection_never_invents_points() {
        let (spec, lut) = fitted_lut();
        let bins = EchoHistBins::default_for(&spec);
        let pair = truth_pair(vec![(ray_with_clusters(0, 0, &[10.0, 20.0]), 2)]);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let mut rng = crate::seed::rng(40);
        for trial in 0..200u64 {
            let n = rng.gen_range(1..8);
            let mut samples: Vec<PredictedSample<f64>> = (0..n)
                .map(|_| PredictedSample {
                    distance: rng.gen_range(1.0..100.0),
                    class: ClassLabel::from_code(rng.gen_range(0..6)).unwrap(),
                    epw: rng.gen_range(0.0..30.0),
                })
                .collect();
            samples.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
            let cfg = SelectionConfig {
                mode: if trial % 2 == 0 { SelectionMode::Argmax } else { SelectionMode::Sample },
                ..Default::default()
            };
            let mut r = crate::seed::stream(trial, &[1]);
            let pts =
                select_echoes(0, 5, &samples, &hist, &lut, &spec, &cfg, Some(&mut r)).unwrap();
            let frame = ScanFrame { frame_id: 0, points: pts.clone() };
            frame.check_invariants().unwrap();
            for p in pts {
                assert!(samples
                    .iter()
                    .any(|s| s.distance == p.distance && s.epw == p.epw));
            }
        }
    }

    #[test]
    fn apply_model_empty_and_deterministic() {
        let (spec, lut) = fitted_lut();
        let bins = EchoHistBins::default_for(&spec);
        let config = SceneConfig::<f64>::default();
        let scene = build_scene(&config, 31).unwrap();
        let dense = cast_rays(&scene, &spec, &CastOptions::default(), 0, 8).unwrap();
        let truth = ground_truth_frame(&dense, &spec, 0.5);
        let hist = fit_echo_hist(&[(dense.clone(), truth)], &bins, &spec, 0.5).unwrap();

        let empty = DenseFrame::<f64> { frame_id: 9, rays: vec![] };
        let cfg = SelectionConfig::default();
        let out =
            apply_model(&empty, &EpwBackend::Lut(&lut), &hist, &lut, &spec, &cfg).unwrap();
        assert!(out.points.is_empty());

        let a = apply_model(&dense, &EpwBackend::Lut(&lut), &hist, &lut, &spec, &cfg).unwrap();
        let b = apply_model(&dense, &EpwBackend::Lut(&lut), &hist, &lut, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();

        // Sample mode is deterministic for a fixed seed too.
        let cfg_s = SelectionConfig {
            mode: SelectionMode::Sample,
            seed: 77,
            ..Default::default()
        };
        let sa = apply_model(&dense, &EpwBackend::Lut(&lut), &hist, &lut, &spec, &cfg_s).unwrap();
        let sb = apply_model(&dense, &EpwBackend::Lut(&lut), &hist, &lut, &spec, &cfg_s).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn wall_end_to_end_preserves_analytic_distances() {
        let (spec, lut) = fitted_lut();
        let bins = EchoHistBins::default_for(&spec);
        let body = Box3::new(Vec3::new(10.5, 0.0, 0.0), 0.0, Vec3::new(0.5, 1.0e4, 1.0e4));
        let scene = Scene {
            objects: vec![SceneObject::new(ClassLabel::None, body, 1.0).unwrap()],
            ground_z: None,
            ground_reflectivity: 0.3,
            rng_seed: 0,
        };
        let opts = CastOptions {
            footprint: BeamFootprint { half_angle_deg: 0.0, sub_rays: 1 },
            epw_noise_sigma: None,
            incidence_in_epw: true,
        };
        let dense = cast_rays(&scene, &spec, &opts, 0, 0).unwrap();
        let truth = ground_truth_frame(&dense, &spec, 0.5);
        let hist = fit_echo_hist(&[(dense.clone(), truth)], &bins, &spec, 0.5).unwrap();
        let cfg = SelectionConfig::default();
        let out = apply_model(&dense, &EpwBackend::Lut(&lut), &hist, &lut, &spec, &cfg).unwrap();
        for p in out.points.iter().filter(|p| p.echo == 0) {
            let (az, alt) = spec.cell_to_angle(p.layer as usize, p.az as usize);
            let expect = 10.0 / (az.to_radians().cos() * alt.to_radians().cos());
            assert!((p.distance - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn hist_file_round_trip() {
        let spec = SensorSpec::<f64>::desk();
        let bins = EchoHistBins::default_for(&spec);
        let pair = truth_pair(vec![(ray_with_clusters(0, 0, &[10.0, 20.0]), 2)]);
        let hist = fit_echo_hist(&[pair], &bins, &spec, 0.5).unwrap();
        let mut buf = Vec::new();
        write_echo_hist(&hist, &mut buf).unwrap();
        let back: EchoOccurrenceHist<f64> = read_echo_hist(&mut buf.as_slice()).unwrap();
        assert_eq!(back, hist);

        let mut bad = buf.clone();
        bad[2] = b'?';
        assert!(read_echo_hist::<f64, _>(&mut bad.as_slice()).is_err());
    }
}
