//! Polar grid maps: the tensor representation of a full scan.
//!
//! Rows are laser layers (row 0 = topmost), columns are azimuth bins over
//! half-open angle intervals. Cell values carry distance, class, or EPW per
//! channel; 0 distance means "no return".

use crate::bin;
use crate::geom::Vec3;
use crate::real::Real;
use crate::scene::{cluster_by_gap, majority_class, ClassLabel, DenseFrame, DEFAULT_CLUSTER_GAP_M};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

/// Angular geometry of the scanner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec<T: Real> {
    pub n_layers: u32,
    pub v_fov: [T; 2],
    pub v_res: T,
    pub h_fov: [T; 2],
    pub h_res: T,
    pub max_echoes: u32,
    pub max_range: T,
}

impl<T: Real> Default for SensorSpec<T> {
    /// 16 layers over [-5, +5] degrees at 0.625, 145 degree horizontal FOV at
    /// 0.125 (1160 columns), 3 echoes, 150 m range.
    fn default() -> Self {
        Self {
            n_layers: 16,
            v_fov: [T::of(-5.0), T::of(5.0)],
            v_res: T::of(0.625),
            h_fov: [T::of(-72.5), T::of(72.5)],
            h_res: T::of(0.125),
            max_echoes: 3,
            max_range: T::of(crate::scene::DEFAULT_MAX_RANGE_M),
        }
    }
}

impl<T: Real> SensorSpec<T> {
    /// Desk-scale variant: azimuth resolution 0.625 degrees (232 columns),
    /// same FOV. Keeps training runs seconds-long.
    pub fn desk() -> Self {
        Self { h_res: T::of(0.625), ..Self::default() }
    }

    pub fn rows(&self) -> usize {
        self.n_layers as usize
    }

    pub fn cols(&self) -> usize {
        ((self.h_fov[1] - self.h_fov[0]) / self.h_res).round().as_f64() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let eps = T::of(1e-9);
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be > 0".into()));
        }
        if self.v_fov[0] >= self.v_fov[1] || self.h_fov[0] >= self.h_fov[1] {
            return Err(Error::Config("inverted FOV".into()));
        }
        if self.v_res <= T::zero() || self.h_res <= T::zero() {
            return Err(Error::Config("resolutions must be > 0".into()));
        }
        let v_span = self.v_fov[1] - self.v_fov[0];
        if (T::of(self.n_layers as f64) * self.v_res - v_span).abs() > eps {
            return Err(Error::Config(format!(
                "n_layers * v_res must equal the vertical span ({} * {} != {})",
                self.n_layers, self.v_res, v_span
            )));
        }
        let h_span = self.h_fov[1] - self.h_fov[0];
        let cols = (h_span / self.h_res).round();
        if (cols * self.h_res - h_span).abs() > eps {
            return Err(Error::Config("horizontal span must be an exact multiple of h_res".into()));
        }
        if self.max_echoes != 3 {
            return Err(Error::Config(format!("max_echoes must be 3, got {}", self.max_echoes)));
        }
        if self.max_range <= T::zero() {
            return Err(Error::Config("max_range must be > 0".into()));
        }
        Ok(())
    }

    /// Map angles (degrees) to `(row, col)`. Azimuth lives in `[h_min, h_max)`;
    /// any angle whose bin index falls outside the grid is a range error.
    pub fn angle_to_cell(&self, azimuth_deg: T, altitude_deg: T) -> Result<(usize, usize)> {
        let col = ((azimuth_deg - self.h_fov[0]) / self.h_res).floor();
        let row = ((self.v_fov[1] - altitude_deg) / self.v_res).floor();
        let cols = T::of(self.cols() as f64);
        let rows = T::of(self.rows() as f64);
        if col < T::zero() || col >= cols {
            return Err(Error::Range(format!("azimuth {azimuth_deg} outside FOV")));
        }
        if row < T::zero() || row >= rows {
            return Err(Error::Range(format!("altitude {altitude_deg} outside FOV")));
        }
        Ok((row.as_f64() as usize, col.as_f64() as usize))
    }

    /// Bin-center angles (degrees) of a cell: `(azimuth, altitude)`.
    pub fn cell_to_angle(&self, row: usize, col: usize) -> (T, T) {
        let az = self.h_fov[0] + (T::of(col as f64) + T::of(0.5)) * self.h_res;
        let alt = self.v_fov[1] - (T::of(row as f64) + T::of(0.5)) * self.v_res;
        (az, alt)
    }

    /// Unit direction of a cell's bin center; boresight is +x, z is up.
    pub fn direction(&self, row: usize, col: usize) -> Vec3<T> {
        let (az, alt) = self.cell_to_angle(row, col);
        let (az, alt) = (az.to_radians(), alt.to_radians());
        Vec3::new(alt.cos() * az.cos(), alt.cos() * az.sin(), alt.sin())
    }
}

/// What a PGM channel stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    Distance = 0,
    Class = 1,
    Epw = 2,
}

impl ChannelKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ChannelKind::Distance),
            1 => Ok(ChannelKind::Class),
            2 => Ok(ChannelKind::Epw),
            _ => Err(Error::Format(format!("unknown channel tag {tag}"))),
        }
    }
}

/// A channels x rows x cols grid of scalars, row-major within each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarGridMap<T: Real> {
    channels: Vec<ChannelKind>,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> PolarGridMap<T> {
    pub fn zeros(channels: &[ChannelKind], rows: usize, cols: usize) -> Self {
        Self {
            channels: channels.to_vec(),
            rows,
            cols,
            data: vec![T::zero(); channels.len() * rows * cols],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn kind(&self, ch: usize) -> ChannelKind {
        self.channels[ch]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn idx(&self, ch: usize, row: usize, col: usize) -> usize {
        (ch * self.rows + row) * self.cols + col
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> T {
        self.data[self.idx(ch, row, col)]
    }

    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: T) {
        let i = self.idx(ch, row, col);
        self.data[i] = v;
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        &self.data[ch * self.rows * self.cols..(ch + 1) * self.rows * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    fn expect_dims(&self, spec: &SensorSpec<T>) -> Result<()> {
        if self.rows != spec.rows() || self.cols != spec.cols() {
            return Err(Error::Dim(format!(
                "grid is {}x{}, spec wants {}x{}",
                self.rows,
                self.cols,
                spec.rows(),
                spec.cols()
            )));
        }
        Ok(())
    }

    fn expect_kinds(&self, kinds: &[ChannelKind]) -> Result<()> {
        if self.channels != kinds {
            return Err(Error::Dim(format!(
                "channel layout {:?} does not match expected {:?}",
                self.channels, kinds
            )));
        }
        Ok(())
    }
}

/// One realistic scan return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPoint<T: Real> {
    pub layer: u8,
    pub az: u16,
    pub echo: u8,
    pub distance: T,
    pub epw: T,
    pub class: ClassLabel,
}

/// A full realistic scan: at most one point per (layer, azimuth, echo).
#[derive(Clone, Debug, PartialEq)]
pub struct ScanFrame<T: Real> {
    pub frame_id: u64,
    pub points: Vec<ScanPoint<T>>,
}

impl<T: Real> ScanFrame<T> {
    pub fn sort_canonical(&mut self) {
        self.points.sort_by_key(|p| (p.layer, p.az, p.echo));
    }

    /// Per ray, echoes must form a prefix of {0, 1, 2} with strictly
    /// increasing distances; duplicates are a data error.
    pub fn check_invariants(&self) -> Result<()> {
        let mut rays: BTreeMap<(u8, u16), Vec<(u8, T)>> = BTreeMap::new();
        for p in &self.points {
            if p.echo > 2 {
                return Err(Error::Data(format!("echo index {} out of range", p.echo)));
            }
            if p.distance <= T::zero() || p.epw < T::zero() {
                return Err(Error::Data("non-positive distance or negative epw".into()));
            }
            rays.entry((p.layer, p.az)).or_default().push((p.echo, p.distance));
        }
        for ((layer, az), mut echoes) in rays {
            echoes.sort_by_key(|e| e.0);
            for (i, (echo, _)) in echoes.iter().enumerate() {
                if *echo as usize != i {
                    return Err(Error::Data(format!(
                        "ray ({layer}, {az}) echoes are not a prefix"
                    )));
                }
            }
            for w in echoes.windows(2) {
                if w[1].1 <= w[0].1 {
                    return Err(Error::Data(format!(
                        "ray ({layer}, {az}) echo distances not strictly increasing"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Encoding and decoding
// ---------------------------------------------------------------------------

/// Encode one echo of a scan frame into a (Distance, Class) grid.
pub fn encode<T: Real>(
    frame: &ScanFrame<T>,
    spec: &SensorSpec<T>,
    echo: u8,
) -> Result<PolarGridMap<T>> {
    spec.validate()?;
    if echo as u32 >= spec.max_echoes {
        return Err(Error::Range(format!("echo {echo} >= max_echoes")));
    }
    let mut map = PolarGridMap::zeros(
        &[ChannelKind::Distance, ChannelKind::Class],
        spec.rows(),
        spec.cols(),
    );
    for p in frame.points.iter().filter(|p| p.echo == echo) {
        let (row, col) = (p.layer as usize, p.az as usize);
        if row >= spec.rows() || col >= spec.cols() {
            return Err(Error::Data(format!("point ({}, {}) outside grid", p.layer, p.az)));
        }
        if map.get(0, row, col) != T::zero() {
            return Err(Error::Data(format!(
                "duplicate point for (layer {}, az {}, echo {echo})",
                p.layer, p.az
            )));
        }
        map.set(0, row, col, p.distance);
        map.set(1, row, col, T::of(p.class.code() as f64));
    }
    Ok(map)
}

/// Encode one echo's EPW values into a single-channel grid.
pub fn encode_epw<T: Real>(
    frame: &ScanFrame<T>,
    spec: &SensorSpec<T>,
    echo: u8,
) -> Result<PolarGridMap<T>> {
    spec.validate()?;
    if echo as u32 >= spec.max_echoes {
        return Err(Error::Range(format!("echo {echo} >= max_echoes")));
    }
    let mut map = PolarGridMap::zeros(&[ChannelKind::Epw], spec.rows(), spec.cols());
    for p in frame.points.iter().filter(|p| p.echo == echo) {
        let (row, col) = (p.layer as usize, p.az as usize);
        if row >= spec.rows() || col >= spec.cols() {
            return Err(Error::Data(format!("point ({}, {}) outside grid", p.layer, p.az)));
        }
        map.set(0, row, col, p.epw);
    }
    Ok(map)
}

/// Encode one echo of a dense frame: per ray, the echo-th distance cluster's
/// minimum distance and majority class (ties toward the lower code).
pub fn encode_dense<T: Real>(
    dense: &DenseFrame<T>,
    spec: &SensorSpec<T>,
    echo: u8,
) -> Result<PolarGridMap<T>> {
    spec.validate()?;
    if echo as u32 >= spec.max_echoes {
        return Err(Error::Range(format!("echo {echo} >= max_echoes")));
    }
    let gap = T::of(DEFAULT_CLUSTER_GAP_M);
    let mut map = PolarGridMap::zeros(
        &[ChannelKind::Distance, ChannelKind::Class],
        spec.rows(),
        spec.cols(),
    );
    for ray in &dense.rays {
        let (row, col) = (ray.layer as usize, ray.az as usize);
        if row >= spec.rows() || col >= spec.cols() {
            return Err(Error::Data(format!("ray ({}, {}) outside grid", ray.layer, ray.az)));
        }
        let clusters = cluster_by_gap(&ray.samples, gap);
        if let Some(r) = clusters.get(echo as usize) {
            let cluster = &ray.samples[r.clone()];
            map.set(0, row, col, cluster[0].distance);
            map.set(1, row, col, T::of(majority_class(cluster).code() as f64));
        }
    }
    Ok(map)
}

/// Decode one echo from a (Distance, Class) grid plus an EPW grid.
pub fn decode<T: Real>(
    dist_class: &PolarGridMap<T>,
    epw: &PolarGridMap<T>,
    spec: &SensorSpec<T>,
    echo: u8,
) -> Result<Vec<ScanPoint<T>>> {
    spec.validate()?;
    if echo as u32 >= spec.max_echoes {
        return Err(Error::Range(format!("echo {echo} >= max_echoes")));
    }
    dist_class.expect_dims(spec)?;
    dist_class.expect_kinds(&[ChannelKind::Distance, ChannelKind::Class])?;
    epw.expect_dims(spec)?;
    epw.expect_kinds(&[ChannelKind::Epw])?;
    let mut points = Vec::new();
    for row in 0..spec.rows() {
        for col in 0..spec.cols() {
            let d = dist_class.get(0, row, col);
            if d < T::zero() {
                return Err(Error::Data(format!("negative distance at ({row}, {col})")));
            }
            let e = epw.get(0, row, col);
            if e < T::zero() {
                return Err(Error::Data(format!("negative epw at ({row}, {col})")));
            }
            if d == T::zero() {
                continue;
            }
            let cls_raw = dist_class.get(1, row, col).as_f64();
            if (cls_raw - cls_raw.round()).abs() > 1e-6 || !(0.0..=5.0).contains(&cls_raw.round()) {
                return Err(Error::Data(format!("invalid class value {cls_raw} at ({row}, {col})")));
            }
            points.push(ScanPoint {
                layer: row as u8,
                az: col as u16,
                echo,
                distance: d,
                epw: e,
                class: ClassLabel::from_code(cls_raw.round() as u8)?,
            });
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// PGM binary format: magic "PGM1", u32 version, u32 channels/rows/cols,
// one u8 semantics tag per channel, then f32 LE payload (channel-major).
// ---------------------------------------------------------------------------

const PGM_MAGIC: &[u8; 4] = b"PGM1";
const PGM_VERSION: u32 = 1;
const MAX_CELLS: u64 = 1 << 30;

pub fn write_pgm<T: Real, W: Write>(map: &PolarGridMap<T>, w: &mut W) -> Result<()> {
    w.write_all(PGM_MAGIC)?;
    bin::write_u32(w, PGM_VERSION)?;
    bin::write_u32(w, map.channels() as u32)?;
    bin::write_u32(w, map.rows() as u32)?;
    bin::write_u32(w, map.cols() as u32)?;
    for ch in 0..map.channels() {
        bin::write_u8(w, map.kind(ch) as u8)?;
    }
    for &v in map.data() {
        bin::write_f32(w, v.as_f64() as f32)?;
    }
    Ok(())
}

pub fn read_pgm<T: Real, R: Read>(r: &mut R) -> Result<PolarGridMap<T>> {
    bin::expect_magic(r, PGM_MAGIC)?;
    let version = bin::read_u32(r)?;
    if version != PGM_VERSION {
        return Err(Error::Format(format!("unsupported PGM version {version}")));
    }
    let channels = bin::read_u32(r)? as u64;
    let rows = bin::read_u32(r)? as u64;
    let cols = bin::read_u32(r)? as u64;
    let cells = channels
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .filter(|&v| v <= MAX_CELLS)
        .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
    let mut kinds = Vec::with_capacity(channels as usize);
    for _ in 0..channels {
        kinds.push(ChannelKind::from_tag(bin::read_u8(r)?));
    }
    let kinds = kinds.into_iter().collect::<Result<Vec<_>>>()?;
    let mut map = PolarGridMap::zeros(&kinds, rows as usize, cols as usize);
    for i in 0..cells as usize {
        map.data[i] = T::of(bin::read_f32(r)? as f64);
    }
    // Trailing bytes mean the header does not describe the payload.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(map),
        _ => Err(Error::Format("payload larger than header-declared size".into())),
    }
}

pub fn write_pgm_path<T: Real>(map: &PolarGridMap<T>, path: &std::path::Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(map, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm_path<T: Real>(path: &std::path::Path) -> Result<PolarGridMap<T>> {
    read_pgm(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

// ---------------------------------------------------------------------------
// Scan-frame CSV: header `frame,echo,layer,az,distance_m,epw_ns,cls`,
// 6 fractional digits.
// ---------------------------------------------------------------------------

const SCAN_CSV_HEADER: &str = "frame,echo,layer,az,distance_m,epw_ns,cls";

pub fn write_scan_csv<T: Real, W: Write>(frames: &[ScanFrame<T>], w: &mut W) -> Result<()> {
    writeln!(w, "{SCAN_CSV_HEADER}")?;
    for frame in frames {
        for p in &frame.points {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6},{}",
                frame.frame_id,
                p.echo,
                p.layer,
                p.az,
                p.distance.as_f64(),
                p.epw.as_f64(),
                p.class.code()
            )?;
        }
    }
    Ok(())
}

pub fn read_scan_csv<T: Real, R: BufRead>(r: R) -> Result<Vec<ScanFrame<T>>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty scan csv".into()))??;
    if header.trim() != SCAN_CSV_HEADER {
        return Err(Error::Format(format!("unexpected csv header: {header}")));
    }
    let mut by_frame: BTreeMap<u64, Vec<ScanPoint<T>>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!("csv line {}: want 7 fields", lineno + 2)));
        }
        let bad = |what: &str| Error::Format(format!("csv line {}: bad {what}", lineno + 2));
        let frame: u64 = fields[0].parse().map_err(|_| bad("frame"))?;
        let echo: u8 = fields[1].parse().map_err(|_| bad("echo"))?;
        let layer: u8 = fields[2].parse().map_err(|_| bad("layer"))?;
        let az: u16 = fields[3].parse().map_err(|_| bad("az"))?;
        let distance: f64 = fields[4].parse().map_err(|_| bad("distance_m"))?;
        let epw: f64 = fields[5].parse().map_err(|_| bad("epw_ns"))?;
        let cls: u8 = fields[6].parse().map_err(|_| bad("cls"))?;
        by_frame.entry(frame).or_default().push(ScanPoint {
            layer,
            az,
            echo,
            distance: T::of(distance),
            epw: T::of(epw),
            class: ClassLabel::from_code(cls)?,
        });
    }
    let mut frames = Vec::with_capacity(by_frame.len());
    for (frame_id, points) in by_frame {
        let mut frame = ScanFrame { frame_id, points };
        frame.sort_canonical();
        frame.check_invariants()?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_scan_csv_path<T: Real>(frames: &[ScanFrame<T>], path: &std::path::Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_scan_csv(frames, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_scan_csv_path<T: Real>(path: &std::path::Path) -> Result<Vec<ScanFrame<T>>> {
    read_scan_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Random well-formed scan frame: a test and benchmark data source.
pub fn random_scan_frame<T: Real, R: Rng>(
    spec: &SensorSpec<T>,
    frame_id: u64,
    density: f64,
    rng: &mut R,
) -> ScanFrame<T> {
    let mut points = Vec::new();
    for layer in 0..spec.rows() as u8 {
        for az in 0..spec.cols() as u16 {
            if rng.gen::<f64>() >= density {
                continue;
            }
            let echoes = rng.gen_range(1..=3u8);
            let mut d = rng.gen_range(1.0..spec.max_range.as_f64() * 0.6);
            for echo in 0..echoes {
                points.push(ScanPoint {
                    layer,
                    az,
                    echo,
                    distance: T::of(d),
                    epw: T::of(rng.gen_range(0.0..crate::scene::EPW_MAX_NS)),
                    class: ClassLabel::from_code(rng.gen_range(0..6)).unwrap(),
                });
                d += rng.gen_range(1.0..10.0);
            }
        }
    }
    let mut frame = ScanFrame { frame_id, points };
    frame.sort_canonical();
    frame
}
