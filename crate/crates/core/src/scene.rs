//! Synthetic scenes, diverging-beam ray casting, and the parametric EPW
//! oracle that stands in for real sensor traces.
//!
//! A cast produces a *dense* frame: per (layer, azimuth) direction up to K
//! sub-ray samples, each annotated with exact intersection distance, class,
//! incidence cosine, and a reference EPW. The ground-truth reduction rule
//! (`ray_echo_truth`) clusters a ray's samples by distance gaps and keeps the
//! nearest three clusters as echoes.

use crate::geom::{Box3, Vec3};
use crate::pgm::{ScanFrame, ScanPoint, SensorSpec};
use crate::real::Real;
use crate::{seed, Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::ops::Range;

/// Object classes carried by scan points. Codes are stable: 0..5 in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    None = 0,
    Car = 1,
    Truck = 2,
    Pedestrian = 3,
    Motorbike = 4,
    HighReflective = 5,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 6] = [
        ClassLabel::None,
        ClassLabel::Car,
        ClassLabel::Truck,
        ClassLabel::Pedestrian,
        ClassLabel::Motorbike,
        ClassLabel::HighReflective,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("class code {code} out of range 0..5")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::None => "none",
            ClassLabel::Car => "car",
            ClassLabel::Truck => "truck",
            ClassLabel::Pedestrian => "pedestrian",
            ClassLabel::Motorbike => "motorbike",
            ClassLabel::HighReflective => "high_reflective",
        }
    }
}

/// EPW oracle constants (declared model constants, not measured values).
pub const EPW_ALPHA_PER_M: f64 = 0.005;
pub const EPW_NOISE_SIGMA_NS: f64 = 0.5;
pub const EPW_MAX_NS: f64 = 50.0;
pub const DEFAULT_MAX_RANGE_M: f64 = 150.0;
pub const DEFAULT_CLUSTER_GAP_M: f64 = 0.5;
const GROUND_REFLECTIVITY: f64 = 0.3;

/// Base EPW in nanoseconds at zero distance, unit reflectivity, normal incidence.
pub fn epw_base_ns(class: ClassLabel) -> f64 {
    match class {
        ClassLabel::None => 8.0,
        ClassLabel::Car => 12.0,
        ClassLabel::Truck => 16.0,
        ClassLabel::Pedestrian => 6.0,
        ClassLabel::Motorbike => 7.0,
        ClassLabel::HighReflective => 25.0,
    }
}

/// Reference EPW: `base(class) * reflectivity * incidence_cos * exp(-alpha * d)`,
/// clipped to `[0, EPW_MAX_NS]`.
pub fn reference_epw<T: Real>(
    class: ClassLabel,
    distance: T,
    incidence_cos: T,
    reflectivity: T,
) -> Result<T> {
    if distance <= T::zero() {
        return Err(Error::Domain(format!("distance {distance} must be > 0")));
    }
    if incidence_cos < T::zero() || incidence_cos > T::one() {
        return Err(Error::Domain(format!("incidence_cos {incidence_cos} outside [0, 1]")));
    }
    if reflectivity < T::zero() || reflectivity > T::one() {
        return Err(Error::Domain(format!("reflectivity {reflectivity} outside [0, 1]")));
    }
    let epw = T::of(epw_base_ns(class))
        * reflectivity
        * incidence_cos
        * (-T::of(EPW_ALPHA_PER_M) * distance).exp();
    Ok(epw.max(T::zero()).min(T::of(EPW_MAX_NS)))
}

/// Reference EPW with additive Gaussian noise of standard deviation `sigma`,
/// clipped to `[0, EPW_MAX_NS]` after the noise is applied.
pub fn reference_epw_noisy<T: Real, R: Rng>(
    class: ClassLabel,
    distance: T,
    incidence_cos: T,
    reflectivity: T,
    sigma: T,
    rng: &mut R,
) -> Result<T> {
    let clean = reference_epw(class, distance, incidence_cos, reflectivity)?;
    let eps: f64 = rng.sample(StandardNormal);
    let noisy = clean + T::of(eps) * sigma;
    Ok(noisy.max(T::zero()).min(T::of(EPW_MAX_NS)))
}

/// One object in a scene: a yaw-oriented box with a class and a reflectivity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject<T: Real> {
    pub class: ClassLabel,
    pub body: Box3<T>,
    pub reflectivity: T,
}

impl<T: Real> SceneObject<T> {
    pub fn new(class: ClassLabel, body: Box3<T>, reflectivity: T) -> Result<Self> {
        if body.half_extents.x <= T::zero()
            || body.half_extents.y <= T::zero()
            || body.half_extents.z <= T::zero()
        {
            return Err(Error::Config("half extents must be strictly positive".into()));
        }
        if reflectivity < T::zero() || reflectivity > T::one() {
            return Err(Error::Config(format!("reflectivity {reflectivity} outside [0, 1]")));
        }
        Ok(Self { class, body, reflectivity })
    }
}

/// A static scene around the sensor at the origin. `ground_z = None` means no
/// ground plane at all (bench scenes); generated scenes always have one.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T: Real> {
    pub objects: Vec<SceneObject<T>>,
    pub ground_z: Option<T>,
    pub ground_reflectivity: T,
    pub rng_seed: u64,
}

/// Count range for one class in a generated scene.
#[derive(Clone, Copy, Debug)]
pub struct ClassMix {
    pub class: ClassLabel,
    pub min_count: u32,
    pub max_count: u32,
}

/// Scene-generation parameters.
#[derive(Clone, Debug)]
pub struct SceneConfig<T: Real> {
    pub mixes: Vec<ClassMix>,
    pub x_range: [T; 2],
    pub y_range: [T; 2],
    pub ground_z: T,
    /// Fixed reflectivity for every surface; `None` samples per-class ranges.
    pub reflectivity: Option<T>,
}

impl<T: Real> Default for SceneConfig<T> {
    fn default() -> Self {
        Self {
            mixes: vec![
                ClassMix { class: ClassLabel::Car, min_count: 1, max_count: 3 },
                ClassMix { class: ClassLabel::Truck, min_count: 0, max_count: 1 },
                ClassMix { class: ClassLabel::Pedestrian, min_count: 0, max_count: 2 },
                ClassMix { class: ClassLabel::Motorbike, min_count: 0, max_count: 1 },
                ClassMix { class: ClassLabel::HighReflective, min_count: 0, max_count: 1 },
            ],
            x_range: [T::of(6.0), T::of(120.0)],
            y_range: [T::of(-25.0), T::of(25.0)],
            ground_z: T::of(-1.8),
            reflectivity: None,
        }
    }
}

impl<T: Real> SceneConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for m in &self.mixes {
            if m.min_count > m.max_count {
                return Err(Error::Config(format!(
                    "inverted count range {}..{} for class {}",
                    m.min_count,
                    m.max_count,
                    m.class.name()
                )));
            }
        }
        if self.x_range[0] >= self.x_range[1] || self.y_range[0] >= self.y_range[1] {
            return Err(Error::Config("inverted placement bounds".into()));
        }
        if let Some(r) = self.reflectivity {
            if r < T::zero() || r > T::one() {
                return Err(Error::Config(format!("reflectivity {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn typical_half_extents(class: ClassLabel) -> [f64; 3] {
    match class {
        ClassLabel::None => [1.0, 1.0, 0.8],
        ClassLabel::Car => [2.2, 0.9, 0.75],
        ClassLabel::Truck => [4.0, 1.3, 1.6],
        ClassLabel::Pedestrian => [0.25, 0.25, 0.85],
        ClassLabel::Motorbike => [0.9, 0.35, 0.6],
        ClassLabel::HighReflective => [0.4, 0.4, 0.9],
    }
}

fn typical_reflectivity(class: ClassLabel) -> [f64; 2] {
    match class {
        ClassLabel::None => [0.2, 0.5],
        ClassLabel::Car => [0.3, 0.7],
        ClassLabel::Truck => [0.3, 0.7],
        ClassLabel::Pedestrian => [0.2, 0.5],
        ClassLabel::Motorbike => [0.3, 0.6],
        ClassLabel::HighReflective => [0.85, 1.0],
    }
}

/// Build a scene deterministically from `(config, seed)`. Objects rest on the
/// ground plane and never contain the sensor origin.
pub fn build_scene<T: Real>(config: &SceneConfig<T>, seed: u64) -> Result<Scene<T>> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let mut objects = Vec::new();
    for mix in &config.mixes {
        let n = if mix.min_count == mix.max_count {
            mix.min_count
        } else {
            rng.gen_range(mix.min_count..=mix.max_count)
        };
        for _ in 0..n {
            let he0 = typical_half_extents(mix.class);
            let jit = |rng: &mut rand_chacha::ChaCha8Rng, base: f64| {
                T::of(base * rng.gen_range(0.8..1.2))
            };
            let half = Vec3::new(jit(&mut rng, he0[0]), jit(&mut rng, he0[1]), jit(&mut rng, he0[2]));
            let yaw = T::of(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
            let reflectivity = match config.reflectivity {
                Some(r) => r,
                None => {
                    let [lo, hi] = typical_reflectivity(mix.class);
                    T::of(rng.gen_range(lo..hi))
                }
            };
            let mut placed = None;
            for _ in 0..64 {
                let x = T::of(rng.gen_range(config.x_range[0].as_f64()..config.x_range[1].as_f64()));
                let y = T::of(rng.gen_range(config.y_range[0].as_f64()..config.y_range[1].as_f64()));
                let center = Vec3::new(x, y, config.ground_z + half.z);
                let body = Box3::new(center, yaw, half);
                if !body.contains(Vec3::zero()) {
                    placed = Some(body);
                    break;
                }
            }
            let body = placed.ok_or_else(|| {
                Error::Config("placement bounds leave no room clear of the sensor".into())
            })?;
            objects.push(SceneObject::new(mix.class, body, reflectivity)?);
        }
    }
    Ok(Scene {
        objects,
        ground_z: Some(config.ground_z),
        ground_reflectivity: T::of(GROUND_REFLECTIVITY),
        rng_seed: seed,
    })
}

/// One sub-ray hit of a dense ray profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseSample<T: Real> {
    pub sub: u8,
    pub distance: T,
    pub class: ClassLabel,
    pub incidence_cos: T,
    pub epw: T,
}

/// All samples of one (layer, azimuth) beam, sorted by ascending distance
/// (ties broken by sub-ray index).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseRay<T: Real> {
    pub layer: u8,
    pub az: u16,
    pub samples: Vec<DenseSample<T>>,
}

impl<T: Real> DenseRay<T> {
    /// Validate and sort samples into canonical order.
    pub fn from_parts(layer: u8, az: u16, mut samples: Vec<DenseSample<T>>) -> Result<Self> {
        for s in &samples {
            if s.distance <= T::zero() {
                return Err(Error::Data(format!("sample distance {} must be > 0", s.distance)));
            }
            if s.incidence_cos < T::zero() || s.incidence_cos > T::one() {
                return Err(Error::Data(format!(
                    "incidence_cos {} outside [0, 1]",
                    s.incidence_cos
                )));
            }
            if s.epw < T::zero() {
                return Err(Error::Data(format!("epw {} must be >= 0", s.epw)));
            }
        }
        samples.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap()
                .then(a.sub.cmp(&b.sub))
        });
        Ok(Self { layer, az, samples })
    }
}

/// Ideal simulator output for one full scan: dense annotated ray profiles.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFrame<T: Real> {
    pub frame_id: u64,
    pub rays: Vec<DenseRay<T>>,
}

/// Beam divergence model: one central sub-ray plus `sub_rays - 1` on the rim
/// of a cone of `half_angle_deg`. A zero half angle casts only the central ray.
#[derive(Clone, Copy, Debug)]
pub struct BeamFootprint<T: Real> {
    pub half_angle_deg: T,
    pub sub_rays: u32,
}

impl<T: Real> Default for BeamFootprint<T> {
    fn default() -> Self {
        Self { half_angle_deg: T::of(0.2), sub_rays: 5 }
    }
}

/// Ray-cast options: footprint, EPW noise, and whether the geometric incidence
/// cosine enters the EPW formula (disable for distance-and-class-only targets).
#[derive(Clone, Copy, Debug)]
pub struct CastOptions<T: Real> {
    pub footprint: BeamFootprint<T>,
    pub epw_noise_sigma: Option<T>,
    pub incidence_in_epw: bool,
}

impl<T: Real> Default for CastOptions<T> {
    fn default() -> Self {
        Self {
            footprint: BeamFootprint::default(),
            epw_noise_sigma: Some(T::of(EPW_NOISE_SIGMA_NS)),
            incidence_in_epw: true,
        }
    }
}

struct Hit<T: Real> {
    t: T,
    class: ClassLabel,
    incidence_cos: T,
    reflectivity: T,
}

fn nearest_hit<T: Real>(scene: &Scene<T>, dir: Vec3<T>, max_range: T) -> Option<Hit<T>> {
    let origin = Vec3::zero();
    let mut best: Option<Hit<T>> = None;
    if let Some(gz) = scene.ground_z {
        if dir.z != T::zero() {
            let t = gz / dir.z;
            if t > T::zero() && t <= max_range {
                best = Some(Hit {
                    t,
                    class: ClassLabel::None,
                    incidence_cos: dir.z.abs(),
                    reflectivity: scene.ground_reflectivity,
                });
            }
        }
    }
    for obj in &scene.objects {
        if let Some((t, normal)) = obj.body.raycast(origin, dir) {
            if t <= max_range && best.as_ref().map_or(true, |b| t < b.t) {
                best = Some(Hit {
                    t,
                    class: obj.class,
                    incidence_cos: dir.dot(normal).abs().min(T::one()),
                    reflectivity: obj.reflectivity,
                });
            }
        }
    }
    best
}

fn sub_ray_dirs<T: Real>(dir: Vec3<T>, footprint: &BeamFootprint<T>) -> Vec<Vec3<T>> {
    if footprint.half_angle_deg <= T::zero() || footprint.sub_rays <= 1 {
        return vec![dir];
    }
    let up = Vec3::new(T::zero(), T::zero(), T::one());
    let u = dir.cross(up).normalized();
    let v = dir.cross(u).normalized();
    let ha = footprint.half_angle_deg.to_radians();
    let (sin_ha, cos_ha) = (ha.sin(), ha.cos());
    let rim = footprint.sub_rays - 1;
    let mut dirs = Vec::with_capacity(footprint.sub_rays as usize);
    dirs.push(dir);
    for j in 0..rim {
        let psi = T::of(2.0 * std::f64::consts::PI * j as f64 / rim as f64);
        let lateral = u * psi.cos() + v * psi.sin();
        dirs.push((dir * cos_ha + lateral * sin_ha).normalized());
    }
    dirs
}

/// Cast the full scan pattern through a scene, producing a dense frame.
///
/// Deterministic for fixed `(scene, spec, opts, frame_id, seed)`. Rays that
/// hit nothing within `max_range` contribute no samples.
pub fn cast_rays<T: Real>(
    scene: &Scene<T>,
    spec: &SensorSpec<T>,
    opts: &CastOptions<T>,
    frame_id: u64,
    seed: u64,
) -> Result<DenseFrame<T>> {
    spec.validate()?;
    if opts.footprint.sub_rays == 0 {
        return Err(Error::Config("footprint needs at least one sub-ray".into()));
    }
    if opts.footprint.half_angle_deg < T::zero() {
        return Err(Error::Config("beam half angle must be >= 0".into()));
    }
    let mut rng = seed::stream(seed, &[frame_id]);
    let mut rays = Vec::new();
    for row in 0..spec.rows() {
        for col in 0..spec.cols() {
            let dir = spec.direction(row, col);
            let dirs = sub_ray_dirs(dir, &opts.footprint);
            let mut samples = Vec::new();
            for (sub, d) in dirs.iter().enumerate() {
                if let Some(hit) = nearest_hit(scene, *d, spec.max_range) {
                    let inc_for_epw = if opts.incidence_in_epw { hit.incidence_cos } else { T::one() };
                    let epw = match opts.epw_noise_sigma {
                        Some(sigma) => reference_epw_noisy(
                            hit.class,
                            hit.t,
                            inc_for_epw,
                            hit.reflectivity,
                            sigma,
                            &mut rng,
                        )?,
                        None => reference_epw(hit.class, hit.t, inc_for_epw, hit.reflectivity)?,
                    };
                    samples.push(DenseSample {
                        sub: sub as u8,
                        distance: hit.t,
                        class: hit.class,
                        incidence_cos: hit.incidence_cos,
                        epw,
                    });
                }
            }
            if !samples.is_empty() {
                rays.push(DenseRay::from_parts(row as u8, col as u16, samples)?);
            }
        }
    }
    Ok(DenseFrame { frame_id, rays })
}

/// Split an ascending distance list into clusters at gaps wider than `gap`.
pub fn cluster_ranges<T: Real>(distances: &[T], gap: T) -> Vec<Range<usize>> {
    let mut clusters = Vec::new();
    if distances.is_empty() {
        return clusters;
    }
    let mut start = 0;
    for i in 1..distances.len() {
        if distances[i] - distances[i - 1] > gap {
            clusters.push(start..i);
            start = i;
        }
    }
    clusters.push(start..distances.len());
    clusters
}

/// Split a distance-sorted sample slice into clusters at gaps wider than `gap`.
pub fn cluster_by_gap<T: Real>(samples: &[DenseSample<T>], gap: T) -> Vec<Range<usize>> {
    let dists: Vec<T> = samples.iter().map(|s| s.distance).collect();
    cluster_ranges(&dists, gap)
}

/// Majority label of an iterator; ties resolved toward the lower code.
pub fn majority_label(labels: impl IntoIterator<Item = ClassLabel>) -> ClassLabel {
    let mut counts = [0usize; 6];
    for l in labels {
        counts[l.code() as usize] += 1;
    }
    let best = counts.iter().enumerate().max_by_key(|&(i, &c)| (c, usize::MAX - i)).unwrap().0;
    ClassLabel::from_code(best as u8).unwrap()
}

/// Majority class of a sample slice; ties resolved toward the lower code.
pub fn majority_class<T: Real>(samples: &[DenseSample<T>]) -> ClassLabel {
    majority_label(samples.iter().map(|s| s.class))
}

/// One ground-truth echo: cluster-minimum distance, cluster-mean EPW,
/// cluster-majority class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EchoTruth<T: Real> {
    pub distance: T,
    pub epw: T,
    pub class: ClassLabel,
}

/// Reduce one dense ray to its first `max_echoes` clusters.
pub fn ray_echo_truth<T: Real>(ray: &DenseRay<T>, gap: T, max_echoes: usize) -> Vec<EchoTruth<T>> {
    cluster_by_gap(&ray.samples, gap)
        .into_iter()
        .take(max_echoes)
        .map(|r| {
            let cluster = &ray.samples[r];
            let n = T::of(cluster.len() as f64);
            let epw = cluster.iter().map(|s| s.epw).sum::<T>() / n;
            EchoTruth { distance: cluster[0].distance, epw, class: majority_class(cluster) }
        })
        .collect()
}

/// Apply the echo-truth rule to every ray of a dense frame.
pub fn ground_truth_frame<T: Real>(
    dense: &DenseFrame<T>,
    spec: &SensorSpec<T>,
    gap: T,
) -> ScanFrame<T> {
    let mut points = Vec::new();
    for ray in &dense.rays {
        for (echo, t) in ray_echo_truth(ray, gap, spec.max_echoes as usize).iter().enumerate() {
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
    let mut frame = ScanFrame { frame_id: dense.frame_id, points };
    frame.sort_canonical();
    frame
}

/// Generate paired (dense, ground-truth scan) frames with disjoint per-frame
/// seeds. Frame ids are 0..n_train for training, then n_train..n_train+n_val.
#[allow(clippy::type_complexity)]
pub fn make_dataset<T: Real>(
    config: &SceneConfig<T>,
    spec: &SensorSpec<T>,
    opts: &CastOptions<T>,
    n_train: usize,
    n_val: usize,
    master_seed: u64,
) -> Result<(Vec<(DenseFrame<T>, ScanFrame<T>)>, Vec<(DenseFrame<T>, ScanFrame<T>)>)> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config("n_train and n_val must be >= 1".into()));
    }
    let gap = T::of(DEFAULT_CLUSTER_GAP_M);
    let mut all = Vec::with_capacity(n_train + n_val);
    for i in 0..(n_train + n_val) as u64 {
        let scene = build_scene(config, seed::derive(master_seed, &[i, 0]))?;
        let dense = cast_rays(&scene, spec, opts, i, seed::derive(master_seed, &[i, 1]))?;
        let truth = ground_truth_frame(&dense, spec, gap);
        all.push((dense, truth));
    }
    let val = all.split_off(n_train);
    Ok((all, val))
}

// ---------------------------------------------------------------------------
// Dense-frame JSON-lines format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SampleWire {
    sub: u8,
    d: f64,
    cls: u8,
    inc: f64,
    epw: f64,
}

#[derive(Serialize, Deserialize)]
struct DenseLineWire {
    frame: u64,
    layer: u8,
    az: u16,
    samples: Vec<SampleWire>,
}

/// Write dense frames as JSON lines, one ray group per line.
pub fn write_dense_jsonl<T: Real, W: Write>(frames: &[DenseFrame<T>], w: &mut W) -> Result<()> {
    for frame in frames {
        for ray in &frame.rays {
            let line = DenseLineWire {
                frame: frame.frame_id,
                layer: ray.layer,
                az: ray.az,
                samples: ray
                    .samples
                    .iter()
                    .map(|s| SampleWire {
                        sub: s.sub,
                        d: s.distance.as_f64(),
                        cls: s.class.code(),
                        inc: s.incidence_cos.as_f64(),
                        epw: s.epw.as_f64(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut *w, &line)
                .map_err(|e| Error::Format(format!("dense jsonl: {e}")))?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Build samples from raw wire tuples (sub, distance, class code, incidence,
/// epw), validating the class code.
pub fn dense_samples_from_wire<T: Real>(
    samples: Vec<(u8, f64, u8, f64, f64)>,
) -> Result<Vec<DenseSample<T>>> {
    samples
        .into_iter()
        .map(|(sub, d, cls, inc, epw)| {
            Ok(DenseSample {
                sub,
                distance: T::of(d),
                class: ClassLabel::from_code(cls)?,
                incidence_cos: T::of(inc),
                epw: T::of(epw),
            })
        })
        .collect()
}

/// Read dense frames from JSON lines. Rays are grouped by consecutive frame id.
pub fn read_dense_jsonl<T: Real, R: BufRead>(r: R) -> Result<Vec<DenseFrame<T>>> {
    let mut frames: Vec<DenseFrame<T>> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: DenseLineWire = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dense jsonl line {}: {e}", lineno + 1)))?;
        let samples = dense_samples_from_wire(
            wire.samples.into_iter().map(|s| (s.sub, s.d, s.cls, s.inc, s.epw)).collect(),
        )?;
        let ray = DenseRay::from_parts(wire.layer, wire.az, samples)?;
        match frames.last_mut() {
            Some(f) if f.frame_id == wire.frame => f.rays.push(ray),
            _ => frames.push(DenseFrame { frame_id: wire.frame, rays: vec![ray] }),
        }
    }
    Ok(frames)
}

pub fn write_dense_jsonl_path<T: Real>(
    frames: &[DenseFrame<T>],
    path: &std::path::Path,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dense_jsonl(frames, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dense_jsonl_path<T: Real>(path: &std::path::Path) -> Result<Vec<DenseFrame<T>>> {
    read_dense_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgm::SensorSpec;

    fn flat_options() -> CastOptions<f64> {
        CastOptions { epw_noise_sigma: None, ..Default::default() }
    }

    fn zero_divergence() -> CastOptions<f64> {
        CastOptions {
            footprint: BeamFootprint { half_angle_deg: 0.0, sub_rays: 1 },
            epw_noise_sigma: None,
            incidence_in_epw: true,
        }
    }

    fn wall_scene(x: f64) -> Scene<f64> {
        // Near face of a huge box sits exactly at the given x.
        let body = Box3::new(
            Vec3::new(x + 0.5, 0.0, 0.0),
            0.0,
            Vec3::new(0.5, 1.0e4, 1.0e4),
        );
        Scene {
            objects: vec![SceneObject::new(ClassLabel::None, body, 1.0).unwrap()],
            ground_z: None,
            ground_reflectivity: 0.3,
            rng_seed: 0,
        }
    }

    #[test]
    fn class_codes_round_trip_and_reject_out_of_range() {
        for c in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_code(c.code()).unwrap(), c);
        }
        assert!(ClassLabel::from_code(6).is_err());
    }

    #[test]
    fn reference_epw_limit_cases() {
        // d -> 0+ with unit factors approaches the class base.
        let v: f64 = reference_epw(ClassLabel::Car, 1e-12, 1.0, 1.0).unwrap();
        assert!((v - 12.0).abs() < 1e-9);
        // Zero incidence kills the return for every class.
        for c in ClassLabel::ALL {
            assert_eq!(reference_epw::<f64>(c, 10.0, 0.0, 1.0).unwrap(), 0.0);
        }
        // Hand evaluation: 16 * exp(-0.005 * 100).
        let v: f64 = reference_epw(ClassLabel::Truck, 100.0, 1.0, 1.0).unwrap();
        assert!((v - 16.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 9.70449).abs() < 1e-4);
    }

    #[test]
    fn reference_epw_domain_errors() {
        assert!(reference_epw::<f64>(ClassLabel::Car, 0.0, 1.0, 1.0).is_err());
        assert!(reference_epw::<f64>(ClassLabel::Car, -1.0, 1.0, 1.0).is_err());
        assert!(reference_epw::<f64>(ClassLabel::Car, 1.0, 1.5, 1.0).is_err());
        assert!(reference_epw::<f64>(ClassLabel::Car, 1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn reference_epw_monotone_on_grid() {
        // Non-increasing in distance, non-decreasing in incidence and reflectivity.
        let steps: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        for c in [ClassLabel::Car, ClassLabel::HighReflective] {
            for &inc in &steps {
                for &refl in &steps {
                    let mut prev = f64::INFINITY;
                    for &dt in &steps {
                        let d = 1.0 + dt * 140.0;
                        let v = reference_epw(c, d, inc, refl).unwrap();
                        assert!(v <= prev + 1e-12);
                        prev = v;
                    }
                }
            }
            for &dt in &steps {
                let d = 1.0 + dt * 140.0;
                for &refl in &steps {
                    let mut prev = -1.0;
                    for &inc in &steps {
                        let v = reference_epw(c, d, inc, refl).unwrap();
                        assert!(v >= prev - 1e-12);
                        prev = v;
                    }
                }
            }
        }
    }

    #[test]
    fn build_scene_empty_config() {
        let config = SceneConfig::<f64> { mixes: vec![], ground_z: 0.0, ..Default::default() };
        let scene = build_scene(&config, 7).unwrap();
        assert!(scene.objects.is_empty());
        assert_eq!(scene.ground_z, Some(0.0));
    }

    #[test]
    fn build_scene_deterministic() {
        let config = SceneConfig::<f64>::default();
        assert_eq!(build_scene(&config, 42).unwrap(), build_scene(&config, 42).unwrap());
    }

    #[test]
    fn build_scene_fixed_counts() {
        let config = SceneConfig::<f64> {
            mixes: vec![ClassMix { class: ClassLabel::Car, min_count: 2, max_count: 2 }],
            ..Default::default()
        };
        let scene = build_scene(&config, 42).unwrap();
        assert_eq!(scene.objects.len(), 2);
        assert!(scene.objects.iter().all(|o| o.class == ClassLabel::Car));
    }

    #[test]
    fn build_scene_rejects_inverted_bounds() {
        let config = SceneConfig::<f64> { x_range: [10.0, 5.0], ..Default::default() };
        assert!(matches!(build_scene(&config, 1), Err(Error::Config(_))));
    }

    #[test]
    fn cast_rays_empty_scene_without_ground() {
        let scene = Scene::<f64> {
            objects: vec![],
            ground_z: None,
            ground_reflectivity: 0.3,
            rng_seed: 0,
        };
        let spec = SensorSpec::desk();
        let frame = cast_rays(&scene, &spec, &zero_divergence(), 0, 0).unwrap();
        assert!(frame.rays.is_empty());
    }

    #[test]
    fn cast_rays_wall_matches_analytic_distances() {
        let spec = SensorSpec::desk();
        let frame = cast_rays(&wall_scene(10.0), &spec, &zero_divergence(), 0, 0).unwrap();
        assert_eq!(frame.rays.len(), spec.rows() * spec.cols());
        for ray in &frame.rays {
            assert_eq!(ray.samples.len(), 1);
            let (az, alt) = spec.cell_to_angle(ray.layer as usize, ray.az as usize);
            let expect = 10.0 / (az.to_radians().cos() * alt.to_radians().cos());
            assert!(
                (ray.samples[0].distance - expect).abs() < 1e-9,
                "layer {} az {}",
                ray.layer,
                ray.az
            );
        }
    }

    #[test]
    fn cast_rays_grazing_edge_splits_into_two_clusters() {
        // Car edge near the boresight ray, wall behind: the 0.2 degree cone
        // straddles the edge and samples land at two separated distances.
        // The cell (8, 116) has bin-center azimuth 0.3125 deg, so the central
        // sub-ray crosses y = 0.0545 m at 10 m and the horizontal rim rays
        // cross y = 0.0196 m and 0.0894 m; a car starting at y = 0.03 m
        // catches all but the left rim ray, which reaches the wall.
        let car = SceneObject::new(
            ClassLabel::Car,
            Box3::new(Vec3::new(10.2, 0.23, 0.0), 0.0, Vec3::new(0.2, 0.2, 1.0)),
            0.5,
        )
        .unwrap();
        let mut scene = wall_scene(20.0);
        scene.objects.push(car);
        let spec = SensorSpec::desk();
        let opts = flat_options();
        let frame = cast_rays(&scene, &spec, &opts, 0, 0).unwrap();
        let (row, col) = spec.angle_to_cell(0.0, -0.01).unwrap();
        let ray = frame
            .rays
            .iter()
            .find(|r| r.layer == row as u8 && r.az == col as u16)
            .expect("boresight ray");
        let clusters = cluster_by_gap(&ray.samples, 0.5);
        assert!(clusters.len() >= 2, "want >= 2 clusters, got {:?}", clusters);
        let first = ray.samples[clusters[0].start].distance;
        let second = ray.samples[clusters[1].start].distance;
        assert!(second - first > 0.5);
    }

    #[test]
    fn cast_rays_matches_brute_force_marcher() {
        // 1 mm ray marching against the cast distances, axis-aligned
        // single-box scene, zero divergence, 1000 random rays.
        let body = Box3::new(Vec3::new(30.0, 2.0, 0.5), 0.0, Vec3::new(3.0, 2.0, 1.5));
        let scene = Scene::<f64> {
            objects: vec![SceneObject::new(ClassLabel::Car, body, 0.5).unwrap()],
            ground_z: None,
            ground_reflectivity: 0.3,
            rng_seed: 0,
        };
        let spec = SensorSpec::default();
        let frame = cast_rays(&scene, &spec, &zero_divergence(), 0, 0).unwrap();
        let cast: std::collections::BTreeMap<(u8, u16), f64> = frame
            .rays
            .iter()
            .map(|r| ((r.layer, r.az), r.samples[0].distance))
            .collect();
        let mut rng = seed::rng(99);
        let mut checked = 0;
        while checked < 1000 {
            let row = rng.gen_range(0..spec.rows());
            let col = rng.gen_range(0..spec.cols());
            let dir = spec.direction(row, col);
            let mut marched = None;
            let step = 1.0e-3;
            let mut t = step;
            while t <= 60.0 {
                if body.contains(dir * t) {
                    marched = Some(t);
                    break;
                }
                t += step;
            }
            match (cast.get(&(row as u8, col as u16)), marched) {
                (Some(&a), Some(m)) => assert!((a - m).abs() < 2.0e-3, "a={a} m={m}"),
                (None, None) => {}
                // The marcher can only miss a cast hit by stepping over a
                // sliver thinner than one step near an edge; skip such rays.
                (Some(&a), None) => {
                    let hit = dir * a;
                    let local = hit - body.center;
                    let margin = (body.half_extents.x - local.x.abs())
                        .min(body.half_extents.y - local.y.abs())
                        .min(body.half_extents.z - local.z.abs());
                    assert!(margin < step, "marcher missed a solid hit");
                    continue;
                }
                (None, Some(_)) => panic!("marcher hit where cast missed"),
            }
            checked += 1;
        }
    }

    #[test]
    fn dense_frame_invariants_hold_after_cast() {
        let config = SceneConfig::<f64>::default();
        let scene = build_scene(&config, 5).unwrap();
        let spec = SensorSpec::desk();
        let frame = cast_rays(&scene, &spec, &CastOptions::default(), 3, 11).unwrap();
        for ray in &frame.rays {
            for pair in ray.samples.windows(2) {
                assert!(
                    pair[0].distance < pair[1].distance
                        || (pair[0].distance == pair[1].distance && pair[0].sub <= pair[1].sub)
                );
            }
            for s in &ray.samples {
                assert!(s.distance > 0.0 && s.distance <= spec.max_range);
                assert!((0.0..=1.0).contains(&s.incidence_cos));
                assert!(s.epw >= 0.0);
            }
        }
    }

    #[test]
    fn echo_truth_mean_and_majority() {
        let mk = |d: f64, cls: ClassLabel, epw: f64| DenseSample {
            sub: 0,
            distance: d,
            class: cls,
            incidence_cos: 1.0,
            epw,
        };
        let ray = DenseRay::from_parts(
            0,
            0,
            vec![
                mk(10.0, ClassLabel::Car, 8.0),
                mk(10.1, ClassLabel::None, 12.0),
                mk(20.0, ClassLabel::Truck, 5.0),
            ],
        )
        .unwrap();
        let truth = ray_echo_truth(&ray, 0.5, 3);
        assert_eq!(truth.len(), 2);
        assert_eq!(truth[0].distance, 10.0);
        assert!((truth[0].epw - 10.0).abs() < 1e-12);
        // One Car vs one None: tie resolves to the lower code (None).
        assert_eq!(truth[0].class, ClassLabel::None);
        assert_eq!(truth[1].class, ClassLabel::Truck);
    }

    #[test]
    fn make_dataset_ids_and_bounds() {
        let config = SceneConfig::<f64>::default();
        let spec = SensorSpec::desk();
        let (train, val) = make_dataset(&config, &spec, &flat_options(), 1, 1, 9).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(val.len(), 1);
        assert_ne!(train[0].0.frame_id, val[0].0.frame_id);
        let bound = 16 * spec.cols() * 3;
        assert!(train[0].1.points.len() <= bound);
    }

    #[test]
    fn make_dataset_deterministic_bytes() {
        let config = SceneConfig::<f64>::default();
        let spec = SensorSpec::desk();
        let mk = || {
            let (train, _) =
                make_dataset(&config, &spec, &CastOptions::default(), 2, 1, 21).unwrap();
            let mut buf = Vec::new();
            write_dense_jsonl(&train.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), &mut buf)
                .unwrap();
            buf
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn dense_jsonl_round_trip() {
        let config = SceneConfig::<f64>::default();
        let scene = build_scene(&config, 3).unwrap();
        let spec = SensorSpec::desk();
        let frame = cast_rays(&scene, &spec, &CastOptions::default(), 0, 1).unwrap();
        let mut buf = Vec::new();
        write_dense_jsonl(&[frame.clone()], &mut buf).unwrap();
        let back: Vec<DenseFrame<f64>> = read_dense_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], frame);
    }

    #[test]
    fn dense_jsonl_rejects_bad_class() {
        let line = r#"{"frame":0,"layer":0,"az":0,"samples":[{"sub":0,"d":5.0,"cls":9,"inc":1.0,"epw":1.0}]}"#;
        assert!(read_dense_jsonl::<f64, _>(line.as_bytes()).is_err());
    }
}
