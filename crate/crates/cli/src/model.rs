//! Model bundle loading and the frame-processing path shared by `infer`
//! and `serve`, plus the wire-protocol types.

use crate::cli::{BackendArg, ModeArg};
use epwsim_core::lut::read_lut_path;
use epwsim_core::net::{read_checkpoint_path, Variant};
use epwsim_core::pgm::SensorSpec;
use epwsim_core::scene::{dense_samples_from_wire, DenseRay};
use epwsim_core::select::{
    apply_model, read_echo_hist_path, EpwBackend, SelectionConfig, SelectionMode,
};
use epwsim_core::{DenseFrame, EchoHist, EpwLut, EpwNetwork, Error, Result, ScanFrame};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LUT_FILE: &str = "epw.lut";
pub const HIST_FILE: &str = "echo.ehst";

pub fn checkpoint_name(variant: Variant, echo: u8) -> String {
    format!("{}-echo{echo}.ckpt", variant.slug())
}

/// Everything inference needs, loaded once and shared read-only.
pub struct ModelBundle {
    pub spec: SensorSpec<f64>,
    pub lut: EpwLut,
    pub hist: EchoHist,
    pub nets: Option<Vec<EpwNetwork>>,
    pub mode: SelectionMode,
    pub seed: u64,
}

impl ModelBundle {
    pub fn load(
        dir: &Path,
        spec: SensorSpec<f64>,
        variant: Variant,
        backend: BackendArg,
        mode: ModeArg,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let lut = read_lut_path(&dir.join(LUT_FILE))?;
        let hist = read_echo_hist_path(&dir.join(HIST_FILE))?;
        let nets = match backend {
            BackendArg::Lut => None,
            BackendArg::Net => {
                let mut nets = Vec::with_capacity(3);
                for echo in 0..3u8 {
                    let path = dir.join(checkpoint_name(variant, echo));
                    if !path.exists() {
                        return Err(Error::Data(format!(
                            "missing checkpoint {}",
                            path.display()
                        )));
                    }
                    nets.push(read_checkpoint_path::<f64>(&path)?.0);
                }
                Some(nets)
            }
        };
        Ok(Self { spec, lut, hist, nets, mode: mode.to_core(), seed })
    }

    pub fn process(&self, frame: &DenseFrame) -> Result<ScanFrame> {
        let cfg = SelectionConfig { mode: self.mode, seed: self.seed, ..Default::default() };
        let backend = match &self.nets {
            Some(nets) => EpwBackend::Network(nets),
            None => EpwBackend::Lut(&self.lut),
        };
        apply_model(frame, &backend, &self.hist, &self.lut, &self.spec, &cfg)
    }
}

// ---------------------------------------------------------------------------
// Wire protocol: newline-delimited JSON, one frame per line.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct WireSample {
    pub sub: u8,
    pub d: f64,
    pub cls: u8,
    pub inc: f64,
    pub epw: f64,
}

#[derive(Serialize, Deserialize)]
pub struct WireRay {
    pub layer: u8,
    pub az: u16,
    pub samples: Vec<WireSample>,
}

#[derive(Serialize, Deserialize)]
pub struct WireRequest {
    pub frame_id: u64,
    pub rays: Vec<WireRay>,
}

#[derive(Serialize, Deserialize)]
pub struct WirePoint {
    pub layer: u8,
    pub az: u16,
    pub echo: u8,
    pub distance_m: f64,
    pub epw_ns: f64,
    pub cls: u8,
}

#[derive(Serialize, Deserialize)]
pub struct WireResponse {
    pub frame_id: u64,
    pub points: Vec<WirePoint>,
}

#[derive(Serialize)]
pub struct WireError {
    pub frame_id: Option<u64>,
    pub error: String,
}

impl WireRequest {
    pub fn into_frame(self) -> Result<DenseFrame> {
        let rays = self
            .rays
            .into_iter()
            .map(|r| {
                let samples = dense_samples_from_wire(
                    r.samples.into_iter().map(|s| (s.sub, s.d, s.cls, s.inc, s.epw)).collect(),
                )?;
                DenseRay::from_parts(r.layer, r.az, samples)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseFrame { frame_id: self.frame_id, rays })
    }
}

/// Round to the scan-CSV precision (6 fractional digits) through the decimal
/// string, so wire responses and offline CSV carry bit-identical values.
pub fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap()
}

pub fn response_for(frame: &ScanFrame) -> WireResponse {
    WireResponse {
        frame_id: frame.frame_id,
        points: frame
            .points
            .iter()
            .map(|p| WirePoint {
                layer: p.layer,
                az: p.az,
                echo: p.echo,
                distance_m: round6(p.distance),
                epw_ns: round6(p.epw),
                cls: p.class.code(),
            })
            .collect(),
    }
}
