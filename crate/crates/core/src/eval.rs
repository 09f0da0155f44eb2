//! Statistical KPI suite comparing two scan traces: matched-point error
//! statistics plus distribution comparisons overall, per class, and per
//! oriented bounding box.

use crate::geom::Box3;
use crate::pgm::{ScanFrame, SensorSpec};
use crate::real::Real;
use crate::scene::ClassLabel;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type OrientedBox<T> = Box3<T>;

/// Fixed-edge 1-D histogram. Values outside the edges clamp into the end bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram1D<T: Real> {
    pub edges: Vec<T>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl<T: Real> Histogram1D<T> {
    pub fn new(edges: Vec<T>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("edges must be strictly ascending".into()));
        }
        let n = edges.len() - 1;
        Ok(Self { edges, counts: vec![0; n], total: 0 })
    }

    /// Default EPW binning: 0..50 ns in 0.5 ns steps.
    pub fn epw_default() -> Self {
        Self::new((0..=100).map(|i| T::of(i as f64 * 0.5)).collect()).unwrap()
    }

    pub fn push(&mut self, v: T) {
        let n = self.counts.len();
        let i = match crate::lut::bin_of(&self.edges, v) {
            Some(i) => i,
            None if v < self.edges[0] => 0,
            None => n - 1,
        };
        self.counts[i] += 1;
        self.total += 1;
    }

    pub fn from_values(edges: Vec<T>, values: impl IntoIterator<Item = T>) -> Result<Self> {
        let mut h = Self::new(edges)?;
        for v in values {
            h.push(v);
        }
        Ok(h)
    }

    fn center(&self, i: usize) -> T {
        (self.edges[i] + self.edges[i + 1]) / T::of(2.0)
    }

    /// Normalized bin masses; errors if the histogram is empty.
    pub fn masses(&self) -> Result<Vec<T>> {
        if self.total == 0 {
            return Err(Error::Data("histogram has no mass".into()));
        }
        let t = T::of(self.total as f64);
        Ok(self.counts.iter().map(|&c| T::of(c as f64) / t).collect())
    }
}

/// Wasserstein-1 distance between two normalized histograms with identical
/// edges, treating each bin's mass as a point mass at the bin center
/// (cumulative-difference form).
pub fn wasserstein1<T: Real>(a: &Histogram1D<T>, b: &Histogram1D<T>) -> Result<T> {
    if a.edges != b.edges {
        return Err(Error::Dim("histograms have different edges".into()));
    }
    let pa = a.masses()?;
    let pb = b.masses()?;
    let mut cum = T::zero();
    let mut dist = T::zero();
    for i in 0..pa.len() - 1 {
        cum += pa[i] - pb[i];
        dist += cum.abs() * (a.center(i + 1) - a.center(i));
    }
    Ok(dist)
}

/// Histogram intersection score: sum of min masses, in [0, 1].
pub fn hist_intersection<T: Real>(a: &Histogram1D<T>, b: &Histogram1D<T>) -> Result<T> {
    if a.edges != b.edges {
        return Err(Error::Dim("histograms have different edges".into()));
    }
    let pa = a.masses()?;
    let pb = b.masses()?;
    Ok(pa.iter().zip(&pb).map(|(&x, &y)| x.min(y)).sum())
}

type PointKey = (u64, u8, u16, u8);

fn key_map<T: Real>(frames: &[ScanFrame<T>]) -> Result<BTreeMap<PointKey, (T, ClassLabel)>> {
    let mut map = BTreeMap::new();
    for f in frames {
        for p in &f.points {
            let key = (f.frame_id, p.layer, p.az, p.echo);
            if map.insert(key, (p.epw, p.class)).is_some() {
                return Err(Error::Data(format!("duplicate point key {key:?}")));
            }
        }
    }
    Ok(map)
}

/// Matched-point error statistics over the key intersection
/// (frame, layer, az, echo); unmatched points are counted, not compared.
#[derive(Clone, Debug)]
pub struct ErrorStats<T: Real> {
    pub mean_abs: T,
    pub mse: T,
    pub hist: Histogram1D<T>,
    pub matched: u64,
    pub only_reference: u64,
    pub only_predicted: u64,
}

fn error_stats_inner<T: Real>(
    reference: &[ScanFrame<T>],
    predicted: &[ScanFrame<T>],
) -> Result<ErrorStats<T>> {
    let rm = key_map(reference)?;
    let pm = key_map(predicted)?;
    let mut hist = Histogram1D::epw_default();
    let mut abs_sum = T::zero();
    let mut sq_sum = T::zero();
    let mut matched = 0u64;
    for (key, (re, _)) in &rm {
        if let Some((pe, _)) = pm.get(key) {
            let e = *pe - *re;
            abs_sum += e.abs();
            sq_sum += e * e;
            hist.push(e.abs());
            matched += 1;
        }
    }
    let n = T::of(matched.max(1) as f64);
    Ok(ErrorStats {
        mean_abs: abs_sum / n,
        mse: sq_sum / n,
        hist,
        matched,
        only_reference: rm.len() as u64 - matched,
        only_predicted: pm.len() as u64 - matched,
    })
}

/// As [`error_stats_inner`], but an empty intersection is an error.
pub fn epw_error_stats<T: Real>(
    reference: &[ScanFrame<T>],
    predicted: &[ScanFrame<T>],
) -> Result<ErrorStats<T>> {
    let stats = error_stats_inner(reference, predicted)?;
    if stats.matched == 0 {
        return Err(Error::Data("no matched points between the traces".into()));
    }
    Ok(stats)
}

/// Distribution comparison of strictly positive EPWs.
#[derive(Clone, Debug)]
pub struct DistComparison<T: Real> {
    pub hist_a: Histogram1D<T>,
    pub hist_b: Histogram1D<T>,
    pub wasserstein: T,
    pub intersection: T,
}

/// Compare the nonzero-EPW distributions of two traces; `None` when either
/// side carries no positive EPW at all.
pub fn nonzero_epw_distributions<T: Real>(
    a: &[ScanFrame<T>],
    b: &[ScanFrame<T>],
) -> Result<Option<DistComparison<T>>> {
    let collect = |frames: &[ScanFrame<T>]| {
        let mut h = Histogram1D::epw_default();
        for f in frames {
            for p in &f.points {
                if p.epw > T::zero() {
                    h.push(p.epw);
                }
            }
        }
        h
    };
    let ha = collect(a);
    let hb = collect(b);
    if ha.total == 0 || hb.total == 0 {
        return Ok(None);
    }
    let w = wasserstein1(&ha, &hb)?;
    let i = hist_intersection(&ha, &hb)?;
    Ok(Some(DistComparison { hist_a: ha, hist_b: hb, wasserstein: w, intersection: i }))
}

/// Per-class KPI row.
#[derive(Clone, Debug)]
pub struct ClassKpi<T: Real> {
    pub class: ClassLabel,
    pub matched: u64,
    pub mse: Option<T>,
    pub mean_abs: Option<T>,
    pub wasserstein: Option<T>,
    pub intersection: Option<T>,
}

/// Partition both traces by class and compare each class present on either
/// side; classes absent from both are omitted.
pub fn class_kpi<T: Real>(a: &[ScanFrame<T>], b: &[ScanFrame<T>]) -> Result<Vec<ClassKpi<T>>> {
    let filter = |frames: &[ScanFrame<T>], class: ClassLabel| -> Vec<ScanFrame<T>> {
        frames
            .iter()
            .map(|f| ScanFrame {
                frame_id: f.frame_id,
                points: f.points.iter().filter(|p| p.class == class).copied().collect(),
            })
            .collect()
    };
    let mut rows = Vec::new();
    for class in ClassLabel::ALL {
        let fa = filter(a, class);
        let fb = filter(b, class);
        let na: usize = fa.iter().map(|f| f.points.len()).sum();
        let nb: usize = fb.iter().map(|f| f.points.len()).sum();
        if na == 0 && nb == 0 {
            continue;
        }
        let stats = error_stats_inner(&fa, &fb)?;
        let dist = nonzero_epw_distributions(&fa, &fb)?;
        rows.push(ClassKpi {
            class,
            matched: stats.matched,
            mse: (stats.matched > 0).then_some(stats.mse),
            mean_abs: (stats.matched > 0).then_some(stats.mean_abs),
            wasserstein: dist.as_ref().map(|d| d.wasserstein),
            intersection: dist.as_ref().map(|d| d.intersection),
        });
    }
    Ok(rows)
}

/// Per-box-pair KPI row.
#[derive(Clone, Debug)]
pub struct BoxKpi<T: Real> {
    pub reference_points: u64,
    pub predicted_points: u64,
    /// `None` when either box selects no points (the Empty result).
    pub wasserstein: Option<T>,
    pub intersection: Option<T>,
}

/// Nonzero-EPW distribution distance between the points each box selects.
/// Points convert to Cartesian space through the spec's bin-center angles.
pub fn box_kpi<T: Real>(
    a: &[ScanFrame<T>],
    b: &[ScanFrame<T>],
    pairs: &[(OrientedBox<T>, OrientedBox<T>)],
    spec: &SensorSpec<T>,
) -> Result<Vec<BoxKpi<T>>> {
    spec.validate()?;
    let select = |frames: &[ScanFrame<T>], bx: &OrientedBox<T>| -> Vec<T> {
        let mut epws = Vec::new();
        for f in frames {
            for p in &f.points {
                let pos = spec.direction(p.layer as usize, p.az as usize) * p.distance;
                if bx.contains(pos) && p.epw > T::zero() {
                    epws.push(p.epw);
                }
            }
        }
        epws
    };
    let mut rows = Vec::with_capacity(pairs.len());
    for (box_a, box_b) in pairs {
        let ea = select(a, box_a);
        let eb = select(b, box_b);
        if ea.is_empty() || eb.is_empty() {
            rows.push(BoxKpi {
                reference_points: ea.len() as u64,
                predicted_points: eb.len() as u64,
                wasserstein: None,
                intersection: None,
            });
            continue;
        }
        let ha = Histogram1D::from_values(Histogram1D::<T>::epw_default().edges, ea.iter().copied())?;
        let hb = Histogram1D::from_values(Histogram1D::<T>::epw_default().edges, eb.iter().copied())?;
        rows.push(BoxKpi {
            reference_points: ea.len() as u64,
            predicted_points: eb.len() as u64,
            wasserstein: Some(wasserstein1(&ha, &hb)?),
            intersection: Some(hist_intersection(&ha, &hb)?),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Aggregated report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramDump {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl HistogramDump {
    fn of<T: Real>(h: &Histogram1D<T>) -> Self {
        Self {
            edges: h.edges.iter().map(|e| e.as_f64()).collect(),
            counts: h.counts.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionDump {
    pub wasserstein_ns: f64,
    pub intersection: f64,
    pub reference_hist: HistogramDump,
    pub predicted_hist: HistogramDump,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassKpiDump {
    pub class: String,
    pub matched: u64,
    pub mean_abs_error_ns: Option<f64>,
    pub mse_ns2: Option<f64>,
    pub wasserstein_ns: Option<f64>,
    pub intersection: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxKpiDump {
    pub index: usize,
    pub reference_points: u64,
    pub predicted_points: u64,
    pub wasserstein_ns: Option<f64>,
    pub intersection: Option<f64>,
}

/// The five KPI families: matched-point error stats, the error histogram,
/// the overall nonzero-EPW distribution comparison, class-to-class rows, and
/// box-to-box rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub matched_points: u64,
    pub only_reference: u64,
    pub only_predicted: u64,
    pub mean_abs_error_ns: Option<f64>,
    pub mse_ns2: Option<f64>,
    pub error_histogram: HistogramDump,
    pub overall_distribution: Option<DistributionDump>,
    pub per_class: Vec<ClassKpiDump>,
    pub per_box: Vec<BoxKpiDump>,
}

/// Aggregate every KPI family. Point-aligned metrics fall back to null on
/// fully unpaired traces (the distribution KPIs still apply there).
pub fn full_report<T: Real>(
    reference: &[ScanFrame<T>],
    predicted: &[ScanFrame<T>],
    boxes: Option<&[(OrientedBox<T>, OrientedBox<T>)]>,
    spec: &SensorSpec<T>,
) -> Result<KpiReport> {
    let stats = error_stats_inner(reference, predicted)?;
    let overall = nonzero_epw_distributions(reference, predicted)?;
    let classes = class_kpi(reference, predicted)?;
    let box_rows = match boxes {
        Some(pairs) => box_kpi(reference, predicted, pairs, spec)?,
        None => Vec::new(),
    };
    Ok(KpiReport {
        matched_points: stats.matched,
        only_reference: stats.only_reference,
        only_predicted: stats.only_predicted,
        mean_abs_error_ns: (stats.matched > 0).then(|| stats.mean_abs.as_f64()),
        mse_ns2: (stats.matched > 0).then(|| stats.mse.as_f64()),
        error_histogram: HistogramDump::of(&stats.hist),
        overall_distribution: overall.map(|d| DistributionDump {
            wasserstein_ns: d.wasserstein.as_f64(),
            intersection: d.intersection.as_f64(),
            reference_hist: HistogramDump::of(&d.hist_a),
            predicted_hist: HistogramDump::of(&d.hist_b),
        }),
        per_class: classes
            .iter()
            .map(|c| ClassKpiDump {
                class: c.class.name().to_string(),
                matched: c.matched,
                mean_abs_error_ns: c.mean_abs.map(|v| v.as_f64()),
                mse_ns2: c.mse.map(|v| v.as_f64()),
                wasserstein_ns: c.wasserstein.map(|v| v.as_f64()),
                intersection: c.intersection.map(|v| v.as_f64()),
            })
            .collect(),
        per_box: box_rows
            .iter()
            .enumerate()
            .map(|(index, b)| BoxKpiDump {
                index,
                reference_points: b.reference_points,
                predicted_points: b.predicted_points,
                wasserstein_ns: b.wasserstein.map(|v| v.as_f64()),
                intersection: b.intersection.map(|v| v.as_f64()),
            })
            .collect(),
    })
}

/// Stable-key-order JSON emission.
pub fn report_to_json(report: &KpiReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Format(format!("report json: {e}")))
}

/// Flat `family,label,metric,value` CSV of the scalar metrics.
pub fn report_to_csv(report: &KpiReport) -> String {
    let mut out = String::from("family,label,metric,value\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    out.push_str(&format!("overall,,matched_points,{}\n", report.matched_points));
    out.push_str(&format!("overall,,only_reference,{}\n", report.only_reference));
    out.push_str(&format!("overall,,only_predicted,{}\n", report.only_predicted));
    out.push_str(&format!("overall,,mean_abs_error_ns,{}\n", fmt(report.mean_abs_error_ns)));
    out.push_str(&format!("overall,,mse_ns2,{}\n", fmt(report.mse_ns2)));
    if let Some(d) = &report.overall_distribution {
        out.push_str(&format!("distribution,,wasserstein_ns,{}\n", fmt(Some(d.wasserstein_ns))));
        out.push_str(&format!("distribution,,intersection,{}\n", fmt(Some(d.intersection))));
    }
    for c in &report.per_class {
        out.push_str(&format!("class,{},matched,{}\n", c.class, c.matched));
        out.push_str(&format!("class,{},mean_abs_error_ns,{}\n", c.class, fmt(c.mean_abs_error_ns)));
        out.push_str(&format!("class,{},mse_ns2,{}\n", c.class, fmt(c.mse_ns2)));
        out.push_str(&format!("class,{},wasserstein_ns,{}\n", c.class, fmt(c.wasserstein_ns)));
        out.push_str(&format!("class,{},intersection,{}\n", c.class, fmt(c.intersection)));
    }
    for b in &report.per_box {
        out.push_str(&format!("box,{},reference_points,{}\n", b.index, b.reference_points));
        out.push_str(&format!("box,{},predicted_points,{}\n", b.index, b.predicted_points));
        out.push_str(&format!("box,{},wasserstein_ns,{}\n", b.index, fmt(b.wasserstein_ns)));
        out.push_str(&format!("box,{},intersection,{}\n", b.index, fmt(b.intersection)));
    }
    out
}

/// Two-column (bin center, count) text for gnuplot.
pub fn hist_to_gnuplot(h: &HistogramDump) -> String {
    let mut out = String::new();
    for (i, &c) in h.counts.iter().enumerate() {
        let center = 0.5 * (h.edges[i] + h.edges[i + 1]);
        out.push_str(&format!("{center:.6} {c}\n"));
    }
    out
}
