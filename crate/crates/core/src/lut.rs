//! Histogram lookup-table EPW model: streaming (count, mean, M2) moments per
//! (class, echo, distance bin, yaw bin), fit from scan traces and queried at
//! inference time.

use crate::bin;
use crate::pgm::{ScanFrame, SensorSpec};
use crate::real::Real;
use crate::scene::ClassLabel;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};

pub const N_CLASSES: usize = 6;
pub const N_ECHOES: usize = 3;

/// Bin layout of the table. Edges must cover the sensor range and horizontal
/// FOV exactly. `per_layer` switches on the full 4-D table (off by default:
/// 16 layers multiply sparsity without desk-scale benefit).
#[derive(Clone, Debug, PartialEq)]
pub struct LutBins<T: Real> {
    pub distance_edges: Vec<T>,
    pub yaw_edges: Vec<T>,
    pub per_layer: bool,
}

impl<T: Real> LutBins<T> {
    /// Uniform bins of the given widths over the spec's range and FOV.
    pub fn for_spec(spec: &SensorSpec<T>, dist_step: T, yaw_step: T) -> Result<Self> {
        let bins = Self {
            distance_edges: uniform_edges(T::zero(), spec.max_range, dist_step)?,
            yaw_edges: uniform_edges(spec.h_fov[0], spec.h_fov[1], yaw_step)?,
            per_layer: false,
        };
        bins.validate(spec)?;
        Ok(bins)
    }

    /// Default layout: 5 m distance bins, 5 degree yaw bins.
    pub fn default_for(spec: &SensorSpec<T>) -> Result<Self> {
        Self::for_spec(spec, T::of(5.0), T::of(5.0))
    }

    pub fn validate(&self, spec: &SensorSpec<T>) -> Result<()> {
        check_ascending(&self.distance_edges, "distance")?;
        check_ascending(&self.yaw_edges, "yaw")?;
        let eps = T::of(1e-9);
        let d = &self.distance_edges;
        if (d[0] - T::zero()).abs() > eps || (d[d.len() - 1] - spec.max_range).abs() > eps {
            return Err(Error::Config("distance edges must cover [0, max_range] exactly".into()));
        }
        let y = &self.yaw_edges;
        if (y[0] - spec.h_fov[0]).abs() > eps || (y[y.len() - 1] - spec.h_fov[1]).abs() > eps {
            return Err(Error::Config("yaw edges must cover the horizontal FOV exactly".into()));
        }
        Ok(())
    }

    pub fn n_dist(&self) -> usize {
        self.distance_edges.len() - 1
    }

    pub fn n_yaw(&self) -> usize {
        self.yaw_edges.len() - 1
    }
}

fn uniform_edges<T: Real>(lo: T, hi: T, step: T) -> Result<Vec<T>> {
    if step <= T::zero() || hi <= lo {
        return Err(Error::Config("bad edge parameters".into()));
    }
    let n = ((hi - lo) / step).round();
    if ((hi - lo) - n * step).abs() > T::of(1e-9) {
        return Err(Error::Config("step must divide the covered span exactly".into()));
    }
    let n = n.as_f64() as usize;
    Ok((0..=n).map(|i| lo + step * T::of(i as f64)).collect())
}

fn check_ascending<T: Real>(edges: &[T], what: &str) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Config(format!("{what} edges need at least one bin")));
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{what} edges must be strictly ascending")));
    }
    Ok(())
}

/// Bin index of a value; the last bin is closed on the right so the upper
/// coverage bound stays queryable.
pub(crate) fn bin_of<T: Real>(edges: &[T], v: T) -> Option<usize> {
    if v < edges[0] || v > edges[edges.len() - 1] {
        return None;
    }
    let n = edges.len() - 1;
    let mut i = match edges.binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
        Ok(i) => i,
        Err(i) => i - 1,
    };
    if i >= n {
        i = n - 1;
    }
    Some(i)
}

/// Welford streaming moments of one bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments<T: Real> {
    pub count: u64,
    pub mean: T,
    pub m2: T,
}

impl<T: Real> Default for Moments<T> {
    fn default() -> Self {
        Self { count: 0, mean: T::zero(), m2: T::zero() }
    }
}

impl<T: Real> Moments<T> {
    pub fn push(&mut self, v: T) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / T::of(self.count as f64);
        self.m2 += delta * (v - self.mean);
    }

    /// Parallel merge (Chan et al. update).
    pub fn merge(&mut self, o: &Self) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (T::of(self.count as f64), T::of(o.count as f64));
        let n = na + nb;
        let delta = o.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += o.m2 + delta * delta * na * nb / n;
        self.count += o.count;
    }

    /// Population variance M2/count; undefined below two samples.
    pub fn variance(&self) -> Option<T> {
        if self.count < 2 {
            None
        } else {
            Some(self.m2 / T::of(self.count as f64))
        }
    }

    /// Standard deviation used when sampling: zero below two samples.
    pub fn sampling_std(&self) -> T {
        self.variance().map_or(T::zero(), |v| v.max(T::zero()).sqrt())
    }
}

/// How a query reads a bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    Mean,
    Sample,
}

/// The fitted table.
#[derive(Clone, Debug, PartialEq)]
pub struct EpwLut<T: Real> {
    bins: LutBins<T>,
    n_layers: usize,
    table: Vec<Moments<T>>,
}

impl<T: Real> EpwLut<T> {
    pub fn empty(bins: LutBins<T>, spec: &SensorSpec<T>) -> Result<Self> {
        bins.validate(spec)?;
        let n_layers = if bins.per_layer { spec.rows() } else { 1 };
        let len = N_CLASSES * N_ECHOES * n_layers * bins.n_dist() * bins.n_yaw();
        Ok(Self { bins, n_layers, table: vec![Moments::default(); len] })
    }

    pub fn bins(&self) -> &LutBins<T> {
        &self.bins
    }

    fn flat(&self, class: usize, echo: usize, layer: usize, dist: usize, yaw: usize) -> usize {
        (((class * N_ECHOES + echo) * self.n_layers + layer) * self.bins.n_dist() + dist)
            * self.bins.n_yaw()
            + yaw
    }

    fn layer_index(&self, layer: usize) -> usize {
        if self.bins.per_layer {
            layer
        } else {
            0
        }
    }

    /// Raw moments of the bin containing (distance, yaw), if in coverage.
    pub fn bin_moments(
        &self,
        class: ClassLabel,
        echo: u8,
        layer: usize,
        distance: T,
        yaw_deg: T,
    ) -> Result<Moments<T>> {
        if echo as usize >= N_ECHOES {
            return Err(Error::Range(format!("echo {echo} out of range")));
        }
        let d = bin_of(&self.bins.distance_edges, distance)
            .ok_or_else(|| Error::Range(format!("distance {distance} outside bin coverage")))?;
        let y = bin_of(&self.bins.yaw_edges, yaw_deg)
            .ok_or_else(|| Error::Range(format!("yaw {yaw_deg} outside bin coverage")))?;
        let l = self.layer_index(layer);
        if l >= self.n_layers {
            return Err(Error::Range(format!("layer {layer} out of range")));
        }
        Ok(self.table[self.flat(class.code() as usize, echo as usize, l, d, y)])
    }

    /// Query the table. Empty bins return `None`.
    pub fn query<R: Rng>(
        &self,
        class: ClassLabel,
        echo: u8,
        layer: usize,
        distance: T,
        yaw_deg: T,
        mode: QueryMode,
        rng: Option<&mut R>,
    ) -> Result<Option<T>> {
        let m = self.bin_moments(class, echo, layer, distance, yaw_deg)?;
        if m.count == 0 {
            return Ok(None);
        }
        Ok(Some(match mode {
            QueryMode::Mean => m.mean,
            QueryMode::Sample => {
                let rng = rng.ok_or_else(|| Error::Config("Sample mode needs an RNG".into()))?;
                let eps: f64 = rng.sample(StandardNormal);
                (m.mean + T::of(eps) * m.sampling_std()).max(T::zero())
            }
        }))
    }

    /// Bin moments with the empty-bin fallback applied: nearest non-empty
    /// bin along the distance axis, same class/echo/yaw.
    pub fn bin_moments_with_fallback(
        &self,
        class: ClassLabel,
        echo: u8,
        layer: usize,
        distance: T,
        yaw_deg: T,
    ) -> Result<Option<Moments<T>>> {
        if echo as usize >= N_ECHOES {
            return Err(Error::Range(format!("echo {echo} out of range")));
        }
        let d0 = bin_of(&self.bins.distance_edges, distance)
            .ok_or_else(|| Error::Range(format!("distance {distance} outside bin coverage")))?;
        let y = bin_of(&self.bins.yaw_edges, yaw_deg)
            .ok_or_else(|| Error::Range(format!("yaw {yaw_deg} outside bin coverage")))?;
        let l = self.layer_index(layer);
        let n_dist = self.bins.n_dist();
        for delta in 0..n_dist {
            for d in [d0.checked_sub(delta), d0.checked_add(delta)] {
                let Some(d) = d.filter(|&d| d < n_dist) else { continue };
                let m = self.table[self.flat(class.code() as usize, echo as usize, l, d, y)];
                if m.count > 0 {
                    return Ok(Some(m));
                }
                if delta == 0 {
                    break;
                }
            }
        }
        Ok(None)
    }

    /// Query with the empty-bin fallback: nearest non-empty bin along the
    /// distance axis, same class/echo/yaw (ties toward the nearer range).
    pub fn query_with_fallback<R: Rng>(
        &self,
        class: ClassLabel,
        echo: u8,
        layer: usize,
        distance: T,
        yaw_deg: T,
        mode: QueryMode,
        rng: Option<&mut R>,
    ) -> Result<Option<T>> {
        let Some(m) = self.bin_moments_with_fallback(class, echo, layer, distance, yaw_deg)? else {
            return Ok(None);
        };
        Ok(Some(match mode {
            QueryMode::Mean => m.mean,
            QueryMode::Sample => {
                let rng = rng.ok_or_else(|| Error::Config("Sample mode needs an RNG".into()))?;
                let eps: f64 = rng.sample(StandardNormal);
                (m.mean + T::of(eps) * m.sampling_std()).max(T::zero())
            }
        }))
    }

    /// Merge a table fitted on another shard of the same bin layout.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.bins != other.bins || self.n_layers != other.n_layers {
            return Err(Error::Dim("cannot merge tables with different bin layouts".into()));
        }
        for (a, b) in self.table.iter_mut().zip(&other.table) {
            a.merge(b);
        }
        Ok(())
    }

    /// Number of bins with at least one sample.
    pub fn non_empty_bins(&self) -> usize {
        self.table.iter().filter(|m| m.count > 0).count()
    }

    /// Iterate (class, echo, layer, dist, yaw, moments) over non-empty bins.
    pub fn iter_non_empty(&self) -> impl Iterator<Item = (usize, usize, usize, usize, usize, &Moments<T>)> {
        let (nd, ny) = (self.bins.n_dist(), self.bins.n_yaw());
        let nl = self.n_layers;
        self.table.iter().enumerate().filter(|(_, m)| m.count > 0).map(move |(i, m)| {
            let yaw = i % ny;
            let rest = i / ny;
            let dist = rest % nd;
            let rest = rest / nd;
            let layer = rest % nl;
            let rest = rest / nl;
            let echo = rest % N_ECHOES;
            let class = rest / N_ECHOES;
            (class, echo, layer, dist, yaw, m)
        })
    }
}

/// Fit a table from scan frames with single-pass streaming moments.
pub fn fit_lut<T: Real>(
    trace: &[ScanFrame<T>],
    bins: &LutBins<T>,
    spec: &SensorSpec<T>,
) -> Result<EpwLut<T>> {
    if trace.iter().all(|f| f.points.is_empty()) {
        return Err(Error::Fit("empty trace".into()));
    }
    let mut lut = EpwLut::empty(bins.clone(), spec)?;
    for frame in trace {
        for p in &frame.points {
            if p.echo as usize >= N_ECHOES || p.layer as usize >= spec.rows() {
                return Err(Error::Data(format!("point (layer {}, echo {})", p.layer, p.echo)));
            }
            let (yaw, _) = spec.cell_to_angle(p.layer as usize, p.az as usize);
            let d = bin_of(&lut.bins.distance_edges, p.distance)
                .ok_or_else(|| Error::Data(format!("distance {} outside table", p.distance)))?;
            let y = bin_of(&lut.bins.yaw_edges, yaw)
                .ok_or_else(|| Error::Data(format!("yaw {yaw} outside table")))?;
            let l = lut.layer_index(p.layer as usize);
            let i = lut.flat(p.class.code() as usize, p.echo as usize, l, d, y);
            lut.table[i].push(p.epw);
        }
    }
    Ok(lut)
}

/// CSV summary of non-empty bins: one row per bin with count/mean/std.
pub fn lut_report<T: Real>(lut: &EpwLut<T>) -> String {
    let mut out = String::from("class,echo,layer,dist_lo,dist_hi,yaw_lo,yaw_hi,count,mean_ns,std_ns\n");
    for (class, echo, layer, dist, yaw, m) in lut.iter_non_empty() {
        let std = m.variance().map_or(String::new(), |v| format!("{:.6}", v.sqrt().as_f64()));
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{},{:.6},{}\n",
            class,
            echo,
            layer,
            lut.bins.distance_edges[dist].as_f64(),
            lut.bins.distance_edges[dist + 1].as_f64(),
            lut.bins.yaw_edges[yaw].as_f64(),
            lut.bins.yaw_edges[yaw + 1].as_f64(),
            m.count,
            m.mean.as_f64(),
            std,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// LUT binary format: magic "LUT1", u32 version, bin edges, then per-bin
// (u64 count, f64 mean, f64 M2) little-endian.
// ---------------------------------------------------------------------------

const LUT_MAGIC: &[u8; 4] = b"LUT1";
const LUT_VERSION: u32 = 1;

pub fn write_lut<T: Real, W: Write>(lut: &EpwLut<T>, w: &mut W) -> Result<()> {
    w.write_all(LUT_MAGIC)?;
    bin::write_u32(w, LUT_VERSION)?;
    bin::write_u8(w, lut.bins.per_layer as u8)?;
    bin::write_u32(w, lut.n_layers as u32)?;
    bin::write_u32(w, lut.bins.distance_edges.len() as u32)?;
    for &e in &lut.bins.distance_edges {
        bin::write_f64(w, e.as_f64())?;
    }
    bin::write_u32(w, lut.bins.yaw_edges.len() as u32)?;
    for &e in &lut.bins.yaw_edges {
        bin::write_f64(w, e.as_f64())?;
    }
    bin::write_u64(w, lut.table.len() as u64)?;
    for m in &lut.table {
        bin::write_u64(w, m.count)?;
        bin::write_f64(w, m.mean.as_f64())?;
        bin::write_f64(w, m.m2.as_f64())?;
    }
    Ok(())
}

pub fn read_lut<T: Real, R: Read>(r: &mut R) -> Result<EpwLut<T>> {
    bin::expect_magic(r, LUT_MAGIC)?;
    let version = bin::read_u32(r)?;
    if version != LUT_VERSION {
        return Err(Error::Format(format!("unsupported LUT version {version}")));
    }
    let per_layer = bin::read_u8(r)? != 0;
    let n_layers = bin::read_u32(r)? as usize;
    let nd = bin::read_u32(r)? as usize;
    if !(2..=100_000).contains(&nd) {
        return Err(Error::Format("implausible distance edge count".into()));
    }
    let mut distance_edges = Vec::with_capacity(nd);
    for _ in 0..nd {
        distance_edges.push(T::of(bin::read_f64(r)?));
    }
    let ny = bin::read_u32(r)? as usize;
    if !(2..=100_000).contains(&ny) {
        return Err(Error::Format("implausible yaw edge count".into()));
    }
    let mut yaw_edges = Vec::with_capacity(ny);
    for _ in 0..ny {
        yaw_edges.push(T::of(bin::read_f64(r)?));
    }
    let bins = LutBins { distance_edges, yaw_edges, per_layer };
    check_ascending(&bins.distance_edges, "distance")?;
    check_ascending(&bins.yaw_edges, "yaw")?;
    let n = bin::read_u64(r)? as usize;
    let expect = N_CLASSES * N_ECHOES * n_layers * bins.n_dist() * bins.n_yaw();
    if n != expect {
        return Err(Error::Format(format!("bin count {n} does not match layout ({expect})")));
    }
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        table.push(Moments {
            count: bin::read_u64(r)?,
            mean: T::of(bin::read_f64(r)?),
            m2: T::of(bin::read_f64(r)?),
        });
    }
    Ok(EpwLut { bins, n_layers, table })
}

pub fn write_lut_path<T: Real>(lut: &EpwLut<T>, path: &std::path::Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_lut(lut, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_lut_path<T: Real>(path: &std::path::Path) -> Result<EpwLut<T>> {
    read_lut(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgm::{ScanPoint, SensorSpec};
    use crate::scene::{reference_epw, reference_epw_noisy};
    use crate::seed;
    use rand_chacha::ChaCha8Rng;

    fn point(layer: u8, az: u16, echo: u8, d: f64, epw: f64, class: ClassLabel) -> ScanPoint<f64> {
        ScanPoint { layer, az, echo, distance: d, epw, class }
    }

    fn one_frame(points: Vec<ScanPoint<f64>>) -> Vec<ScanFrame<f64>> {
        vec![ScanFrame { frame_id: 0, points }]
    }

    #[test]
    fn fit_single_point_bin() {
        let spec = SensorSpec::default();
        let bins = LutBins::default_for(&spec).unwrap();
        let trace = one_frame(vec![point(0, 10, 0, 12.0, 10.0, ClassLabel::Car)]);
        let lut = fit_lut(&trace, &bins, &spec).unwrap();
        let (yaw, _) = spec.cell_to_angle(0, 10);
        let m = lut.bin_moments(ClassLabel::Car, 0, 0, 12.0, yaw).unwrap();
        assert_eq!(m.count, 1);
        assert_eq!(m.mean, 10.0);
        assert!(m.variance().is_none());
        let q = lut
            .query::<ChaCha8Rng>(ClassLabel::Car, 0, 0, 12.0, yaw, QueryMode::Mean, None)
            .unwrap();
        assert_eq!(q, Some(10.0));
    }

    #[test]
    fn welford_two_points_hand_check() {
        let spec = SensorSpec::default();
        let bins = LutBins::default_for(&spec).unwrap();
        let trace = one_frame(vec![
            point(0, 10, 0, 12.0, 8.0, ClassLabel::Car),
            point(1, 10, 0, 12.0, 12.0, ClassLabel::Car),
        ]);
        let lut = fit_lut(&trace, &bins, &spec).unwrap();
        let (yaw, _) = spec.cell_to_angle(0, 10);
        let m = lut.bin_moments(ClassLabel::Car, 0, 0, 12.0, yaw).unwrap();
        assert_eq!(m.count, 2);
        assert!((m.mean - 10.0).abs() < 1e-12);
        assert!((m.m2 - 8.0).abs() < 1e-12);
    }

    #[test]
    fn empty_lut_queries_return_none() {
        let spec = SensorSpec::default();
        let lut = EpwLut::<f64>::empty(LutBins::default_for(&spec).unwrap(), &spec).unwrap();
        let q = lut
            .query::<ChaCha8Rng>(ClassLabel::Car, 0, 0, 12.0, 0.0, QueryMode::Mean, None)
            .unwrap();
        assert_eq!(q, None);
        let q = lut
            .query_with_fallback::<ChaCha8Rng>(ClassLabel::Car, 0, 0, 12.0, 0.0, QueryMode::Mean, None)
            .unwrap();
        assert_eq!(q, None);
    }

    #[test]
    fn fit_rejects_empty_trace() {
        let spec = SensorSpec::default();
        let bins = LutBins::<f64>::default_for(&spec).unwrap();
        assert!(matches!(fit_lut::<f64>(&[], &bins, &spec), Err(Error::Fit(_))));
    }

    #[test]
    fn out_of_range_query_errors() {
        let spec = SensorSpec::default();
        let bins = LutBins::default_for(&spec).unwrap();
        let trace = one_frame(vec![point(0, 10, 0, 12.0, 10.0, ClassLabel::Car)]);
        let lut = fit_lut(&trace, &bins, &spec).unwrap();
        assert!(lut
            .query::<ChaCha8Rng>(ClassLabel::Car, 0, 0, 200.0, 0.0, QueryMode::Mean, None)
            .is_err());
        assert!(lut
            .query::<ChaCha8Rng>(ClassLabel::Car, 0, 0, 12.0, 90.0, QueryMode::Mean, None)
            .is_err());
    }

    #[test]
    fn fallback_walks_distance_axis() {
        let spec = SensorSpec::default();
        let bins = LutBins::default_for(&spec).unwrap();
        let trace = one_frame(vec![point(0, 10, 0, 12.0, 10.0, ClassLabel::Car)]);
        let lut = fit_lut(&trace, &bins, &spec).unwrap();
        let (yaw, _) = spec.cell_to_angle(0, 10);
        // Far distance bin is empty; fallback lands on the 10..15 m bin.
        let q = lut
            .query_with_fallback::<ChaCha8Rng>(ClassLabel::Car, 0, 0, 140.0, yaw, QueryMode::Mean, None)
            .unwrap();
        assert_eq!(q, Some(10.0));
    }

    #[test]
    fn merge_equals_concatenated_fit() {
        let spec = SensorSpec::desk();
        let bins = LutBins::default_for(&spec).unwrap();
        let mut rng = seed::rng(5);
        let frames: Vec<ScanFrame<f64>> = (0..6)
            .map(|id| crate::pgm::random_scan_frame(&spec, id, 0.05, &mut rng))
            .collect();
        let (a, b) = frames.split_at(3);
        let mut merged = fit_lut(a, &bins, &spec).unwrap();
        merged.merge(&fit_lut(b, &bins, &spec).unwrap()).unwrap();
        let whole = fit_lut(&frames, &bins, &spec).unwrap();
        assert_eq!(merged.non_empty_bins(), whole.non_empty_bins());
        for ((_, _, _, _, _, ma), (_, _, _, _, _, mw)) in
            merged.iter_non_empty().zip(whole.iter_non_empty())
        {
            assert_eq!(ma.count, mw.count);
            let rel = (ma.mean - mw.mean).abs() / mw.mean.abs().max(1e-30);
            assert!(rel < 1e-9, "mean rel err {rel}");
        }
    }

    #[test]
    fn noise_free_variance_bounded_by_oracle_spread() {
        // All samples follow the formula exactly, so each bin's variance
        // cannot exceed the formula's squared spread within the bin.
        let spec = SensorSpec::desk();
        let bins = LutBins::default_for(&spec).unwrap();
        let mut rng = seed::rng(11);
        let mut points = Vec::new();
        for _ in 0..4000 {
            let layer = rng.gen_range(0..spec.rows()) as u8;
            let az = rng.gen_range(0..spec.cols()) as u16;
            let d = rng.gen_range(1.0..150.0);
            let epw = reference_epw(ClassLabel::Car, d, 1.0, 1.0).unwrap();
            points.push(point(layer, az, 0, d, epw, ClassLabel::Car));
        }
        let lut = fit_lut(&one_frame(points), &bins, &spec).unwrap();
        for (class, _, _, dist, _, m) in lut.iter_non_empty() {
            assert_eq!(class, ClassLabel::Car.code() as usize);
            let lo = lut.bins.distance_edges[dist].max(1e-9);
            let hi = lut.bins.distance_edges[dist + 1];
            // Brute-force min/max of the oracle over the bin.
            let mut fmin = f64::INFINITY;
            let mut fmax = f64::NEG_INFINITY;
            for k in 0..=200 {
                let d = lo + (hi - lo) * k as f64 / 200.0;
                let v = reference_epw(ClassLabel::Car, d.max(1e-9), 1.0, 1.0).unwrap();
                fmin = fmin.min(v);
                fmax = fmax.max(v);
            }
            if let Some(var) = m.variance() {
                let spread = fmax - fmin;
                assert!(var <= spread * spread + 1e-12, "var {var} spread {spread}");
            }
        }
    }

    #[test]
    fn fine_bins_converge_to_oracle_at_centers() {
        // 1 m / 1 degree bins on noise-free data: the mean never deviates from
        // the center value by more than the oracle's within-bin variation.
        let spec = SensorSpec::desk();
        let bins = LutBins::for_spec(&spec, 1.0, 1.0).unwrap();
        let mut rng = seed::rng(13);
        let mut points = Vec::new();
        for _ in 0..20000 {
            let layer = rng.gen_range(0..spec.rows()) as u8;
            let az = rng.gen_range(0..spec.cols()) as u16;
            let d = rng.gen_range(5.0..100.0);
            let epw = reference_epw(ClassLabel::Truck, d, 1.0, 1.0).unwrap();
            points.push(point(layer, az, 0, d, epw, ClassLabel::Truck));
        }
        let lut = fit_lut(&one_frame(points), &bins, &spec).unwrap();
        let mut checked = 0;
        for (_, echo, _, dist, _, m) in lut.iter_non_empty() {
            if echo != 0 {
                continue;
            }
            let lo = lut.bins.distance_edges[dist];
            let hi = lut.bins.distance_edges[dist + 1];
            let center = 0.5 * (lo + hi);
            let at_center = reference_epw(ClassLabel::Truck, center, 1.0, 1.0).unwrap();
            let v_lo = reference_epw(ClassLabel::Truck, lo.max(1e-9), 1.0, 1.0).unwrap();
            let v_hi = reference_epw(ClassLabel::Truck, hi, 1.0, 1.0).unwrap();
            let variation = (v_lo - v_hi).abs();
            assert!((m.mean - at_center).abs() <= variation + 1e-12);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn monte_carlo_mean_recovers_oracle() {
        // 1e4 noisy draws in a handful of bins; the fitted mean lands within
        // 3 sigma / sqrt(n) of the oracle at the bin center.
        let spec = SensorSpec::desk();
        let bins = LutBins::default_for(&spec).unwrap();
        let mut lut = EpwLut::empty(bins, &spec).unwrap();
        let mut rng = seed::rng(23);
        let sigma = 0.5;
        let n = 10_000;
        let cases = [(12.5, 0.0), (52.5, -30.0), (102.5, 30.0)];
        for &(d, yaw) in &cases {
            let di = bin_of(&lut.bins.distance_edges, d).unwrap();
            let yi = bin_of(&lut.bins.yaw_edges, yaw).unwrap();
            let idx = lut.flat(ClassLabel::Car.code() as usize, 0, 0, di, yi);
            for _ in 0..n {
                let v = reference_epw_noisy(ClassLabel::Car, d, 1.0, 1.0, sigma, &mut rng).unwrap();
                lut.table[idx].push(v);
            }
        }
        for &(d, yaw) in &cases {
            let m = lut.bin_moments(ClassLabel::Car, 0, 0, d, yaw).unwrap();
            let oracle = reference_epw(ClassLabel::Car, d, 1.0, 1.0).unwrap();
            let tol = 3.0 * sigma / (n as f64).sqrt();
            assert!((m.mean - oracle).abs() < tol, "mean {} oracle {oracle}", m.mean);
        }
    }

    #[test]
    fn report_row_counts() {
        let spec = SensorSpec::default();
        let empty = EpwLut::<f64>::empty(LutBins::default_for(&spec).unwrap(), &spec).unwrap();
        assert_eq!(lut_report(&empty).lines().count(), 1);

        let trace = one_frame(vec![point(0, 10, 0, 12.0, 10.0, ClassLabel::Car)]);
        let bins = LutBins::default_for(&spec).unwrap();
        let lut = fit_lut(&trace, &bins, &spec).unwrap();
        assert_eq!(lut_report(&lut).lines().count(), 2);
        assert_eq!(lut_report(&lut).lines().count() - 1, lut.non_empty_bins());
    }

    #[test]
    fn lut_file_round_trip() {
        let spec = SensorSpec::desk();
        let bins = LutBins::default_for(&spec).unwrap();
        let mut rng = seed::rng(31);
        let frames: Vec<ScanFrame<f64>> = (0..3)
            .map(|id| crate::pgm::random_scan_frame(&spec, id, 0.05, &mut rng))
            .collect();
        let lut = fit_lut(&frames, &bins, &spec).unwrap();
        let mut buf = Vec::new();
        write_lut(&lut, &mut buf).unwrap();
        let back: EpwLut<f64> = read_lut(&mut buf.as_slice()).unwrap();
        assert_eq!(back, lut);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_lut::<f64, _>(&mut bad.as_slice()).is_err());
    }
}
