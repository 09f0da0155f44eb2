//! Fully-convolutional EPW regression networks.
//!
//! Six variants share one frame: three down-sampling blocks, an optional
//! bottleneck, three up-sampling blocks, and a 1x1 output head. U-Net family
//! variants concatenate skip connections across the bottleneck; LF variants
//! halve every kernel count; tiny variants run one convolution per block; the
//! CAE pair is a plain autoencoder (no skips, no bottleneck, transpose-conv
//! decoder). Gradients are hand-derived reverse mode over the op primitives.

mod io;
mod ops;
mod train;

pub use io::{read_checkpoint, read_checkpoint_path, write_checkpoint, write_checkpoint_path};
pub use ops::Tensor3;
pub use train::{make_training_set, train, val_l1, EpochStats, TrainConfig, TrainSample};

use crate::pgm::{encode_dense, ChannelKind, PolarGridMap, ScanFrame, ScanPoint, SensorSpec};
use crate::real::Real;
use crate::scene::{ClassLabel, DenseFrame};
use crate::{seed, Error, Result};
use ops::{concat, conv2d, conv2d_backward, maxpool2, maxpool2_backward, split, tconv2, tconv2_backward};
use rand::Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

/// Network variants benchmarked against each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    UnetLf,
    TinyUnet,
    TinyUnetLf,
    Cae,
    CaeLf,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Unet,
        Variant::UnetLf,
        Variant::TinyUnet,
        Variant::TinyUnetLf,
        Variant::Cae,
        Variant::CaeLf,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetLf => "unet-lf",
            Variant::TinyUnet => "tiny",
            Variant::TinyUnetLf => "tiny-lf",
            Variant::Cae => "cae",
            Variant::CaeLf => "cae-lf",
        }
    }

    pub fn from_slug(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    pub(crate) fn id(self) -> u8 {
        Self::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub(crate) fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown variant id {id}")))
    }

    fn half_width(self) -> bool {
        matches!(self, Variant::UnetLf | Variant::TinyUnetLf | Variant::CaeLf)
    }

    fn convs_per_block(self) -> usize {
        match self {
            Variant::Unet | Variant::UnetLf => 2,
            _ => 1,
        }
    }

    fn is_cae(self) -> bool {
        matches!(self, Variant::Cae | Variant::CaeLf)
    }

    pub fn has_skips(self) -> bool {
        !self.is_cae()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TConv<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_ch: usize,
    pub out_ch: usize,
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Conv { idx: usize, relu: bool },
    TConv { idx: usize },
    Pool,
    SaveSkip { level: usize },
    ConcatSkip { level: usize },
}

/// One EPW network: an ordered parameter list plus the variant that fixes the
/// wiring. Input is a 2-channel grid (normalized distance, normalized class);
/// output is a 1-channel EPW grid of the same spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct EpwNetwork<T: Real> {
    pub variant: Variant,
    pub base_channels: usize,
    pub(crate) convs: Vec<Conv<T>>,
    pub(crate) tconvs: Vec<TConv<T>>,
}

struct Layout {
    conv_shapes: Vec<(usize, usize, usize)>,
    tconv_shapes: Vec<(usize, usize)>,
    steps: Vec<Step>,
}

fn layout(variant: Variant, base: usize) -> Layout {
    let b = if variant.half_width() { (base / 2).max(1) } else { base };
    let widths = [b, 2 * b, 4 * b];
    let per = variant.convs_per_block();
    let mut conv_shapes = Vec::new();
    let mut tconv_shapes = Vec::new();
    let mut steps = Vec::new();
    let push_convs = |shapes: &mut Vec<(usize, usize, usize)>,
                          steps: &mut Vec<Step>,
                          in_ch: usize,
                          out_ch: usize,
                          count: usize| {
        let mut cur = in_ch;
        for _ in 0..count {
            steps.push(Step::Conv { idx: shapes.len(), relu: true });
            shapes.push((cur, out_ch, 3));
            cur = out_ch;
        }
    };

    if variant.is_cae() {
        // Encoder: three conv+pool stages. Decoder: three transpose convs.
        let mut in_ch = 2;
        for &w in widths.iter() {
            push_convs(&mut conv_shapes, &mut steps, in_ch, w, 1);
            steps.push(Step::Pool);
            in_ch = w;
        }
        for (i, (tin, tout)) in
            [(widths[2], widths[1]), (widths[1], widths[0]), (widths[0], widths[0])]
                .into_iter()
                .enumerate()
        {
            steps.push(Step::TConv { idx: i });
            tconv_shapes.push((tin, tout));
        }
    } else {
        let bottleneck = 8 * b;
        let mut in_ch = 2;
        for (level, &w) in widths.iter().enumerate() {
            push_convs(&mut conv_shapes, &mut steps, in_ch, w, per);
            steps.push(Step::SaveSkip { level });
            steps.push(Step::Pool);
            in_ch = w;
        }
        push_convs(&mut conv_shapes, &mut steps, widths[2], bottleneck, per);
        let mut up_in = bottleneck;
        for level in (0..3).rev() {
            let w = widths[level];
            steps.push(Step::TConv { idx: tconv_shapes.len() });
            tconv_shapes.push((up_in, w));
            steps.push(Step::ConcatSkip { level });
            push_convs(&mut conv_shapes, &mut steps, 2 * w, w, per);
            up_in = w;
        }
    }
    // 1x1 head, identity activation; EPW non-negativity is applied post hoc.
    steps.push(Step::Conv { idx: conv_shapes.len(), relu: false });
    conv_shapes.push((widths[0], 1, 1));
    Layout { conv_shapes, tconv_shapes, steps }
}

/// Build a network with He-style fan-in initialization (zero biases),
/// deterministic from the seed.
pub fn build_network<T: Real>(variant: Variant, base_channels: usize, init_seed: u64) -> Result<EpwNetwork<T>> {
    if base_channels == 0 {
        return Err(Error::Config("base_channels must be >= 1".into()));
    }
    let lay = layout(variant, base_channels);
    let mut rng = seed::stream(init_seed, &[variant.id() as u64, base_channels as u64]);
    let mut draw = |fan_in: usize, n: usize| -> Vec<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::of(z * std)
            })
            .collect()
    };
    let convs = lay
        .conv_shapes
        .iter()
        .map(|&(in_ch, out_ch, k)| Conv {
            w: draw(in_ch * k * k, out_ch * in_ch * k * k),
            b: vec![T::zero(); out_ch],
            in_ch,
            out_ch,
            k,
        })
        .collect();
    let tconvs = lay
        .tconv_shapes
        .iter()
        .map(|&(in_ch, out_ch)| TConv {
            w: draw(in_ch * 4, in_ch * out_ch * 4),
            b: vec![T::zero(); out_ch],
            in_ch,
            out_ch,
        })
        .collect();
    Ok(EpwNetwork { variant, base_channels, convs, tconvs })
}

enum TapeRec<T: Real> {
    Conv { x: Tensor3<T>, out: Tensor3<T> },
    TConv { x: Tensor3<T>, out: Tensor3<T> },
    Pool { argmax: Vec<u32>, in_dims: (usize, usize, usize) },
    Concat { skip_ch: usize },
}

impl<T: Real> EpwNetwork<T> {
    fn steps(&self) -> Vec<Step> {
        layout(self.variant, self.base_channels).steps
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        if x.ch != 2 {
            return Err(Error::Dim(format!("input must have 2 channels, got {}", x.ch)));
        }
        if x.h == 0 || x.w == 0 || x.h % 8 != 0 || x.w % 8 != 0 {
            return Err(Error::Dim(format!(
                "input dims {}x{} must be positive and divisible by 8",
                x.h, x.w
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &Tensor3<T>,
        mut tape: Option<&mut Vec<TapeRec<T>>>,
        ablate_pools: bool,
    ) -> Result<Tensor3<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips: [Option<Tensor3<T>>; 3] = [None, None, None];
        for step in self.steps() {
            cur = match step {
                Step::Conv { idx, relu } => {
                    let c = &self.convs[idx];
                    let out = conv2d(&cur, &c.w, &c.b, c.out_ch, c.k, relu);
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(TapeRec::Conv { x: cur, out: out.clone() });
                    }
                    out
                }
                Step::TConv { idx } => {
                    let c = &self.tconvs[idx];
                    let out = tconv2(&cur, &c.w, &c.b, c.out_ch, true);
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(TapeRec::TConv { x: cur, out: out.clone() });
                    }
                    out
                }
                Step::Pool => {
                    let in_dims = (cur.ch, cur.h, cur.w);
                    let (mut out, argmax) = maxpool2(&cur);
                    if ablate_pools {
                        out.data.fill(T::zero());
                    }
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(TapeRec::Pool { argmax, in_dims });
                    }
                    out
                }
                Step::SaveSkip { level } => {
                    skips[level] = Some(cur.clone());
                    cur
                }
                Step::ConcatSkip { level } => {
                    let s = skips[level]
                        .take()
                        .ok_or_else(|| Error::Dim("skip connection missing".into()))?;
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(TapeRec::Concat { skip_ch: s.ch });
                    }
                    concat(&s, &cur)
                }
            };
        }
        Ok(cur)
    }

    /// Deterministic forward pass; output is `(1, rows, cols)`.
    pub fn forward(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.run(x, None, false)
    }

    #[cfg(test)]
    pub(crate) fn forward_ablated(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.run(x, None, true)
    }

    /// Parameter tensors in checkpoint order (conv weight, conv bias, ...,
    /// tconv weight, tconv bias, ...).
    pub fn param_vecs(&self) -> Vec<&Vec<T>> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(&c.w);
            v.push(&c.b);
        }
        for c in &self.tconvs {
            v.push(&c.w);
            v.push(&c.b);
        }
        v
    }

    pub fn param_vecs_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.w);
            v.push(&mut c.b);
        }
        for c in &mut self.tconvs {
            v.push(&mut c.w);
            v.push(&mut c.b);
        }
        v
    }

    /// Weight tensors only (no biases); the L2 penalty ranges over these.
    pub fn weight_vecs(&self) -> Vec<&[T]> {
        self.convs
            .iter()
            .map(|c| c.w.as_slice())
            .chain(self.tconvs.iter().map(|c| c.w.as_slice()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_vecs().iter().map(|v| v.len()).sum()
    }

    /// Per-layer kernel counts (output channels), in construction order.
    pub fn kernel_counts(&self) -> Vec<usize> {
        self.convs
            .iter()
            .map(|c| c.out_ch)
            .chain(self.tconvs.iter().map(|c| c.out_ch))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for v in z.param_vecs_mut() {
            v.fill(T::zero());
        }
        z
    }
}

/// Eq. loss: mean squared error over all cells plus `(lambda/2) * sum(w^2)`
/// over the given weight tensors (biases excluded).
pub fn loss<T: Real>(
    pred: &Tensor3<T>,
    target: &Tensor3<T>,
    weights: &[&[T]],
    lambda: T,
) -> Result<T> {
    if pred.ch != target.ch || pred.h != target.h || pred.w != target.w {
        return Err(Error::Dim("pred/target dims differ".into()));
    }
    let n = T::of(pred.data.len() as f64);
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n;
    let l2 = weights
        .iter()
        .flat_map(|w| w.iter())
        .map(|&w| w * w)
        .sum::<T>();
    Ok(mse + lambda / T::of(2.0) * l2)
}

/// Exact reverse-mode gradients of [`loss`] with respect to every parameter.
/// Returns `(loss, gradients)`; the gradient container mirrors the network.
pub fn backward<T: Real>(
    net: &EpwNetwork<T>,
    input: &Tensor3<T>,
    target: &Tensor3<T>,
    lambda: T,
) -> Result<(T, EpwNetwork<T>)> {
    let mut tape = Vec::new();
    let pred = net.run(input, Some(&mut tape), false)?;
    let total = loss(&pred, target, &net.weight_vecs(), lambda)?;

    let n = T::of(pred.data.len() as f64);
    let mut g = pred.clone();
    for (gv, (&p, &t)) in g.data.iter_mut().zip(pred.data.iter().zip(&target.data)) {
        *gv = T::of(2.0) * (p - t) / n;
    }

    let mut grads = net.zeros_like();
    let mut skip_grads: [Option<Tensor3<T>>; 3] = [None, None, None];
    for step in net.steps().into_iter().rev() {
        match step {
            Step::Conv { idx, relu } => {
                let Some(TapeRec::Conv { x, out }) = tape.pop() else {
                    return Err(Error::Dim("tape out of sync".into()));
                };
                let c = &net.convs[idx];
                let (dx, dw, db) = conv2d_backward(&x, &c.w, &out, &g, c.out_ch, c.k, relu);
                add_assign(&mut grads.convs[idx].w, &dw);
                add_assign(&mut grads.convs[idx].b, &db);
                g = dx;
            }
            Step::TConv { idx } => {
                let Some(TapeRec::TConv { x, out }) = tape.pop() else {
                    return Err(Error::Dim("tape out of sync".into()));
                };
                let c = &net.tconvs[idx];
                let (dx, dw, db) = tconv2_backward(&x, &c.w, &out, &g, c.out_ch, true);
                add_assign(&mut grads.tconvs[idx].w, &dw);
                add_assign(&mut grads.tconvs[idx].b, &db);
                g = dx;
            }
            Step::Pool => {
                let Some(TapeRec::Pool { argmax, in_dims }) = tape.pop() else {
                    return Err(Error::Dim("tape out of sync".into()));
                };
                g = maxpool2_backward(&g, &argmax, in_dims);
            }
            Step::ConcatSkip { level } => {
                let Some(TapeRec::Concat { skip_ch }) = tape.pop() else {
                    return Err(Error::Dim("tape out of sync".into()));
                };
                let (gs, gx) = split(&g, skip_ch);
                skip_grads[level] = Some(gs);
                g = gx;
            }
            Step::SaveSkip { level } => {
                if let Some(gs) = skip_grads[level].take() {
                    add_assign(&mut g.data, &gs.data);
                }
            }
        }
    }
    // L2 term: d/dw (lambda/2 * w^2) = lambda * w.
    if lambda != T::zero() {
        for (gc, c) in grads.convs.iter_mut().zip(&net.convs) {
            for (gv, &wv) in gc.w.iter_mut().zip(&c.w) {
                *gv += lambda * wv;
            }
        }
        for (gc, c) in grads.tconvs.iter_mut().zip(&net.tconvs) {
            for (gv, &wv) in gc.w.iter_mut().zip(&c.w) {
                *gv += lambda * wv;
            }
        }
    }
    Ok((total, grads))
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub params: usize,
    pub max_rel_err: f64,
    /// Parameters re-verified at a smaller step because the primary bracket
    /// straddled a ReLU or max-pool kink (where the loss is not smooth).
    pub refined: usize,
}

/// Compare every parameter gradient against a central finite difference of
/// step `h`. Parameters failing `tol` at the primary step are re-checked at
/// `h / 100`, which shrinks the bracket below any fixed kink distance.
pub fn gradient_check<T: Real>(
    net: &EpwNetwork<T>,
    input: &Tensor3<T>,
    target: &Tensor3<T>,
    lambda: T,
    h: T,
    tol: f64,
) -> Result<GradCheck> {
    let (_, grads) = backward(net, input, target, lambda)?;
    let flat: Vec<f64> = grads.param_vecs().iter().flat_map(|v| v.iter().map(|g| g.as_f64())).collect();
    let mut work = net.clone();
    let n_vecs = work.param_vecs().len();
    let mut gi = 0;
    let mut max_rel = 0.0f64;
    let mut refined = 0;
    for vi in 0..n_vecs {
        let len = work.param_vecs()[vi].len();
        for i in 0..len {
            let analytic = flat[gi];
            gi += 1;
            let mut step = h;
            let mut rel = f64::INFINITY;
            for attempt in 0..2 {
                let orig = work.param_vecs()[vi][i];
                work.param_vecs_mut()[vi][i] = orig + step;
                let up = loss(&work.forward(input)?, target, &work.weight_vecs(), lambda)?;
                work.param_vecs_mut()[vi][i] = orig - step;
                let dn = loss(&work.forward(input)?, target, &work.weight_vecs(), lambda)?;
                work.param_vecs_mut()[vi][i] = orig;
                let fd = (up - dn).as_f64() / (2.0 * step.as_f64());
                rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                if rel < tol {
                    break;
                }
                if attempt == 0 {
                    refined += 1;
                    step = step / T::of(100.0);
                }
            }
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradCheck { params: gi, max_rel_err: max_rel, refined })
}

/// Normalize a (Distance, Class) grid into network input space:
/// distance / max_range and class code / 5.
pub fn pgm_to_input<T: Real>(map: &PolarGridMap<T>, spec: &SensorSpec<T>) -> Result<Tensor3<T>> {
    if map.channels() != 2
        || map.kind(0) != ChannelKind::Distance
        || map.kind(1) != ChannelKind::Class
    {
        return Err(Error::Dim("expected a (Distance, Class) grid".into()));
    }
    let (h, w) = (map.rows(), map.cols());
    let mut t = Tensor3::zeros(2, h, w);
    let inv_range = T::one() / spec.max_range;
    let inv_class = T::one() / T::of(5.0);
    for (i, &v) in map.channel(0).iter().enumerate() {
        t.data[i] = v * inv_range;
    }
    for (i, &v) in map.channel(1).iter().enumerate() {
        t.data[h * w + i] = v * inv_class;
    }
    Ok(t)
}

/// Stage-one inference over a dense frame: encode each echo, run its network,
/// and emit EPW-annotated points. Cells without an input return are masked to
/// zero and produce no point; predicted EPW is clipped at 0.
pub fn predict_frame<T: Real>(
    nets: &[EpwNetwork<T>],
    dense: &DenseFrame<T>,
    spec: &SensorSpec<T>,
) -> Result<ScanFrame<T>> {
    let mut points = Vec::new();
    for (echo, net) in nets.iter().enumerate().take(spec.max_echoes as usize) {
        let raw = encode_dense(dense, spec, echo as u8)?;
        let out = net.forward(&pgm_to_input(&raw, spec)?)?;
        for row in 0..spec.rows() {
            for col in 0..spec.cols() {
                let d = raw.get(0, row, col);
                if d == T::zero() {
                    continue;
                }
                let cls = ClassLabel::from_code(raw.get(1, row, col).as_f64().round() as u8)?;
                points.push(ScanPoint {
                    layer: row as u8,
                    az: col as u16,
                    echo: echo as u8,
                    distance: d,
                    epw: out.get(0, row, col).max(T::zero()),
                    class: cls,
                });
            }
        }
    }
    let mut frame = ScanFrame { frame_id: dense.frame_id, points };
    frame.sort_canonical();
    Ok(frame)
}

/// One row of the variant benchmark table.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub variant: Variant,
    pub val_mse: f64,
    pub accuracy_pct: f64,
    pub latency_ms: f64,
}

/// Benchmark variants on a validation set: MSE over all cells, accuracy as
/// the percentage of cells within `tau` of the target, and median forward
/// latency over `reps` runs.
pub fn bench<T: Real>(
    entries: &[(Variant, &EpwNetwork<T>)],
    val: &[TrainSample<T>],
    reps: usize,
    tau: T,
) -> Result<Vec<BenchRow>> {
    if val.is_empty() || reps == 0 {
        return Err(Error::Config("bench needs a validation set and reps >= 1".into()));
    }
    let mut rows = Vec::with_capacity(entries.len());
    for &(variant, net) in entries {
        let mut se = 0.0;
        let mut within = 0u64;
        let mut cells = 0u64;
        for sample in val {
            let pred = net.forward(&sample.input)?;
            for (&p, &t) in pred.data.iter().zip(&sample.target.data) {
                let e = (p - t).as_f64();
                se += e * e;
                if e.abs() <= tau.as_f64() {
                    within += 1;
                }
                cells += 1;
            }
        }
        let mut times: Vec<f64> = (0..reps)
            .map(|_| {
                let t0 = Instant::now();
                let _ = net.forward(&val[0].input);
                t0.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(BenchRow {
            variant,
            val_mse: se / cells as f64,
            accuracy_pct: 100.0 * within as f64 / cells as f64,
            latency_ms: times[times.len() / 2],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scene, cast_rays, CastOptions, SceneConfig};

    fn tiny_input(seed: u64) -> Tensor3<f64> {
        let mut rng = seed::rng(seed);
        let data = (0..2 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor3::from_data(2, 8, 8, data)
    }

    fn jitter_params(net: &mut EpwNetwork<f64>, seed: u64) {
        let mut rng = seed::rng(seed);
        for v in net.param_vecs_mut() {
            for p in v.iter_mut() {
                *p += rng.gen_range(-0.05..0.05);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a: EpwNetwork<f64> = build_network(Variant::Cae, 4, 11).unwrap();
        let b: EpwNetwork<f64> = build_network(Variant::Cae, 4, 11).unwrap();
        assert_eq!(a, b);
        let c: EpwNetwork<f64> = build_network(Variant::Cae, 4, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lf_halves_every_kernel_count() {
        let full: EpwNetwork<f64> = build_network(Variant::Unet, 16, 0).unwrap();
        let lf: EpwNetwork<f64> = build_network(Variant::UnetLf, 16, 0).unwrap();
        assert!(lf.param_count() < full.param_count());
        let fk = full.kernel_counts();
        let lk = lf.kernel_counts();
        assert_eq!(fk.len(), lk.len());
        for (f, l) in fk.iter().zip(&lk) {
            // The single-channel head stays at one kernel.
            if *f == 1 {
                assert_eq!(*l, 1);
            } else {
                assert_eq!(*l, f / 2);
            }
        }
    }

    #[test]
    fn unet_channel_plan_matches_catalog() {
        let net: EpwNetwork<f64> = build_network::<f64>(Variant::Unet, 16, 0).unwrap();
        // Down path kernel counts (16, 32, 64), bottleneck 128.
        let counts = net.kernel_counts();
        assert_eq!(
            counts,
            vec![16, 16, 32, 32, 64, 64, 128, 128, 64, 64, 32, 32, 16, 16, 1, 64, 32, 16]
        );
    }

    #[test]
    fn output_shape_matches_input_for_all_variants() {
        for variant in Variant::ALL {
            let net: EpwNetwork<f64> = build_network(variant, 4, 1).unwrap();
            for (h, w) in [(8, 8), (16, 232), (8, 32)] {
                let x = Tensor3::zeros(2, h, w);
                let y = net.forward(&x).unwrap();
                assert_eq!((y.ch, y.h, y.w), (1, h, w), "{variant:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_input_dims() {
        let net: EpwNetwork<f64> = build_network(Variant::Cae, 2, 0).unwrap();
        assert!(net.forward(&Tensor3::zeros(2, 10, 10)).is_err());
        assert!(net.forward(&Tensor3::zeros(3, 8, 8)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut net: EpwNetwork<f64> = build_network(Variant::TinyUnet, 4, 5).unwrap();
        for v in net.param_vecs_mut() {
            v.fill(0.0);
        }
        let y = net.forward(&Tensor3::zeros(2, 8, 8)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_identities() {
        let p: Tensor3<f64> = Tensor3::from_data(1, 1, 2, vec![1.0, 2.0]);
        assert_eq!(loss(&p, &p, &[], 0.0).unwrap(), 0.0);

        let t = Tensor3::from_data(1, 1, 2, vec![1.0, 4.0]);
        assert!((loss(&p, &t, &[], 0.0).unwrap() - 2.0).abs() < 1e-15);

        let w = [3.0f64];
        assert!((loss(&p, &p, &[&w], 2.0).unwrap() - 9.0).abs() < 1e-15);

        // Decomposition is exact.
        let full = loss(&p, &t, &[&w], 2.0).unwrap();
        let data = loss(&p, &t, &[&w], 0.0).unwrap();
        assert_eq!(full, data + 2.0 / 2.0 * 9.0);
    }

    #[test]
    fn gradients_zero_when_pred_equals_target() {
        let net: EpwNetwork<f64> = build_network(Variant::TinyUnetLf, 4, 3).unwrap();
        let x = tiny_input(7);
        let target = net.forward(&x).unwrap();
        let (_, grads) = backward(&net, &x, &target, 0.0).unwrap();
        for v in grads.param_vecs() {
            assert!(v.iter().all(|&g| g.abs() < 1e-14));
        }
    }

    #[test]
    fn l2_gradient_is_lambda_w_exactly() {
        let net: EpwNetwork<f64> = build_network(Variant::Cae, 2, 9).unwrap();
        let x = tiny_input(8);
        let target = net.forward(&x).unwrap();
        let lambda = 0.37;
        let (_, grads) = backward(&net, &x, &target, lambda).unwrap();
        for (gc, c) in grads.convs.iter().zip(&net.convs) {
            for (g, w) in gc.w.iter().zip(&c.w) {
                assert!((g - lambda * w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn finite_difference_gradient_check_tiny() {
        // Full sweep over every parameter of two small variants; the
        // acceptance suite covers all six. Checked at a jittered parameter
        // point: at the exact zero-bias init, cells fed by all-zero patches
        // sit precisely on the ReLU kink and the loss is not differentiable.
        for variant in [Variant::TinyUnetLf, Variant::CaeLf] {
            let mut net: EpwNetwork<f64> = build_network(variant, 2, 42).unwrap();
            jitter_params(&mut net, 42);
            let x = tiny_input(13);
            let target = Tensor3::from_data(1, 8, 8, tiny_input(14).data[..64].to_vec());
            let report = gradient_check(&net, &x, &target, 1e-3, 1e-5, 1e-4).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{variant:?}: max rel err {}",
                report.max_rel_err
            );
            // Kink refinements stay rare.
            assert!(report.refined * 100 <= report.params, "{variant:?}: {report:?}");
        }
    }

    #[test]
    fn skip_ablation_separates_unet_from_cae() {
        // Zeroing every pooled tensor starves the deep path. U-Net variants
        // still react to the input through skips; CAE outputs go constant.
        let unet: EpwNetwork<f64> = build_network(Variant::TinyUnet, 4, 21).unwrap();
        let a = unet.forward_ablated(&tiny_input(1)).unwrap();
        let b = unet.forward_ablated(&tiny_input(2)).unwrap();
        assert!(a.data.iter().zip(&b.data).any(|(x, y)| (x - y).abs() > 1e-9));

        let cae: EpwNetwork<f64> = build_network(Variant::Cae, 4, 21).unwrap();
        let a = cae.forward_ablated(&tiny_input(1)).unwrap();
        let b = cae.forward_ablated(&tiny_input(2)).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn column_perturbation_stays_local() {
        // Editing one input column can only move outputs within the receptive
        // field; a generous band bound still leaves most columns untouched.
        for (variant, band) in [(Variant::TinyUnetLf, 48usize), (Variant::CaeLf, 48)] {
            let net: EpwNetwork<f64> = build_network(variant, 4, 33).unwrap();
            let mut rng = seed::rng(50);
            let data: Vec<f64> = (0..2 * 16 * 232).map(|_| rng.gen_range(0.0..1.0)).collect();
            let x = Tensor3::from_data(2, 16, 232, data);
            let mut xp = x.clone();
            let col = 60;
            for c in 0..2 {
                for y in 0..16 {
                    xp.set(c, y, col, 1.0 - x.get(c, y, col));
                }
            }
            let ya = net.forward(&x).unwrap();
            let yb = net.forward(&xp).unwrap();
            for y in 0..16 {
                for cc in 0..232 {
                    if cc + band < col || cc > col + band {
                        let d = (ya.get(0, y, cc) - yb.get(0, y, cc)).abs();
                        assert!(d < 1e-12, "{variant:?} leaked to col {cc}: {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn predict_frame_masks_empty_cells() {
        let spec = SensorSpec::desk();
        let config = SceneConfig::<f64>::default();
        let scene = build_scene(&config, 7).unwrap();
        let dense = cast_rays(&scene, &spec, &CastOptions::default(), 0, 3).unwrap();
        let nets: Vec<EpwNetwork<f64>> = (0..3)
            .map(|e| build_network(Variant::CaeLf, 4, e).unwrap())
            .collect();
        let frame = predict_frame(&nets, &dense, &spec).unwrap();
        frame.check_invariants().unwrap();
        // Every emitted point coincides with a nonzero input cell.
        let raw = encode_dense(&dense, &spec, 0).unwrap();
        for p in frame.points.iter().filter(|p| p.echo == 0) {
            assert!(raw.get(0, p.layer as usize, p.az as usize) > 0.0);
            assert!(p.epw >= 0.0);
        }

        let empty = DenseFrame::<f64> { frame_id: 1, rays: vec![] };
        assert!(predict_frame(&nets, &empty, &spec).unwrap().points.is_empty());
    }
}

