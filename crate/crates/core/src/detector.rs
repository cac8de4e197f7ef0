//! Micro anchor-free detector: one 3x3 conv with tanh, average pooling down to
//! a `G x G` grid, and per-cell linear heads for class, objectness and box
//! offsets. Forward and backward passes are written out by hand.
//!
//! Pixel intensities are shifted by -0.5 before the convolution so that
//! pre-activations start out centred on zero; the padding border is zero in
//! the shifted space.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, BBox};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::synthgen::{GroundTruthObject, Image};

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_height: usize,
    pub in_width: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub grid: usize,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_height: 32,
            in_width: 32,
            in_channels: 1,
            hidden: 8,
            grid: 8,
            num_classes: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_height == 0 || self.in_width == 0 || self.in_channels == 0 {
            return Err(Error::config("input dimensions must be positive"));
        }
        if self.hidden == 0 || self.num_classes == 0 || self.grid == 0 {
            return Err(Error::config("hidden, grid and num_classes must be positive"));
        }
        if self.in_height % self.grid != 0 || self.in_width % self.grid != 0 {
            return Err(Error::config(format!(
                "grid {} must divide the {}x{} input",
                self.grid, self.in_height, self.in_width
            )));
        }
        if self.in_height / self.grid != self.in_width / self.grid {
            return Err(Error::config("grid stride must be equal along both axes"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.in_height / self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Ordered `(name, shape)` of every parameter tensor.
    fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (k, c, m) = (self.hidden, self.in_channels, self.num_classes);
        vec![
            ("conv.weight", vec![k, c, KERNEL, KERNEL]),
            ("conv.bias", vec![k]),
            ("cls.weight", vec![m, k]),
            ("cls.bias", vec![m]),
            ("obj.weight", vec![1, k]),
            ("obj.bias", vec![1]),
            ("box.weight", vec![4, k]),
            ("box.bias", vec![4]),
        ]
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let entries = self
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let e = LayoutEntry {
                    name: name.to_string(),
                    offset,
                    shape,
                };
                offset += len;
                e
            })
            .collect();
        Layout { entries }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    fn entry(&self, name: &str) -> &LayoutEntry {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .expect("layout entry exists")
    }
}

/// Flat model weights plus the tensor layout they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(Arc::clone(&self.layout))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout && self.values.len() == other.values.len()
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let e = self.layout.entry(name);
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let e = self.layout.entry(name).clone();
        &mut self.values[e.offset..e.offset + e.len()]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Layout("add_scaled on mismatched vectors".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values.iter_mut() {
            *v *= factor;
        }
    }
}

/// Raw per-cell head outputs, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub grid: usize,
    pub stride: usize,
    pub num_classes: usize,
    /// `G*G*num_classes`
    pub cls_logits: Vec<f64>,
    /// `G*G`
    pub obj_logits: Vec<f64>,
    /// `G*G*4` pre-activation box values.
    pub box_raw: Vec<f64>,
    /// `G*G*4` distances `(l, t, r, b)` in pixels, `softplus(box_raw)`.
    pub offsets: Vec<f64>,
}

impl DetectorOutput {
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (row, col) = (cell / self.grid, cell % self.grid);
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    pub fn image_size(&self) -> f64 {
        (self.grid * self.stride) as f64
    }
}

/// Gradient of a loss with respect to the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub cls_logits: Vec<f64>,
    pub obj_logits: Vec<f64>,
    /// With respect to the post-activation offsets.
    pub offsets: Vec<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Per-cell training target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    /// `(l, t, r, b)` distances from the cell center to the box edges.
    pub offsets: [f64; 4],
}

/// A cell is positive for the object whose box strictly contains its center;
/// overlapping candidates resolve to the smaller box, then the earlier one.
pub fn assign_targets(arch: &ArchConfig, objects: &[GroundTruthObject]) -> Vec<Option<CellTarget>> {
    let s = arch.stride() as f64;
    (0..arch.cells())
        .map(|cell| {
            let (row, col) = (cell / arch.grid, cell % arch.grid);
            let (xc, yc) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
            let mut best: Option<&GroundTruthObject> = None;
            for o in objects {
                if o.bbox.contains_strict(xc, yc) && best.is_none_or(|b| o.bbox.area() < b.bbox.area()) {
                    best = Some(o);
                }
            }
            best.map(|o| CellTarget {
                class_id: o.class_id,
                offsets: [
                    xc - o.bbox.x1(),
                    yc - o.bbox.y1(),
                    o.bbox.x2() - xc,
                    o.bbox.y2() - yc,
                ],
            })
        })
        .collect()
}

/// Objectness, classification and box terms; the total weights them 1:1:1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub objectness: f64,
    pub classification: f64,
    pub box_regression: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.objectness + self.classification + self.box_regression
    }
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Loss and output-space gradient for the given per-cell targets.
///
/// Objectness BCE is averaged over all cells; class cross-entropy and
/// smooth-L1 on the offsets are averaged over positive cells.
impl OutputGrad {
    fn zeros_like(out: &DetectorOutput) -> Self {
        OutputGrad {
            cls_logits: vec![0.0; out.cls_logits.len()],
            obj_logits: vec![0.0; out.obj_logits.len()],
            offsets: vec![0.0; out.offsets.len()],
        }
    }

    fn add_scaled(&mut self, other: &OutputGrad, scale: f64) {
        let pairs = [
            (&mut self.cls_logits, &other.cls_logits),
            (&mut self.obj_logits, &other.obj_logits),
            (&mut self.offsets, &other.offsets),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

pub fn loss_from_output(out: &DetectorOutput, targets: &[Option<CellTarget>]) -> (LossTerms, OutputGrad) {
    let cells = out.grid * out.grid;
    let m = out.num_classes;
    let n_pos = targets.iter().filter(|t| t.is_some()).count();
    let mut terms = LossTerms::default();
    let mut grad = OutputGrad {
        cls_logits: vec![0.0; cells * m],
        obj_logits: vec![0.0; cells],
        offsets: vec![0.0; cells * 4],
    };
    let inv_cells = 1.0 / cells as f64;
    let inv_pos = if n_pos > 0 { 1.0 / n_pos as f64 } else { 0.0 };

    for cell in 0..cells {
        let z = out.obj_logits[cell];
        let y = if targets[cell].is_some() { 1.0 } else { 0.0 };
        terms.objectness += (softplus(z) - y * z) * inv_cells;
        grad.obj_logits[cell] = (sigmoid(z) - y) * inv_cells;

        if let Some(t) = targets[cell] {
            let logits = &out.cls_logits[cell * m..(cell + 1) * m];
            terms.classification += (log_sum_exp(logits) - logits[t.class_id]) * inv_pos;
            for (j, p) in softmax(logits).into_iter().enumerate() {
                let onehot = if j == t.class_id { 1.0 } else { 0.0 };
                grad.cls_logits[cell * m + j] = (p - onehot) * inv_pos;
            }
            for k in 0..4 {
                let (v, g) = smooth_l1(out.offsets[cell * 4 + k] - t.offsets[k]);
                terms.box_regression += v * inv_pos;
                grad.offsets[cell * 4 + k] = g * inv_pos;
            }
        }
    }
    (terms, grad)
}

struct ForwardCache {
    /// tanh activations, `hidden x H x W`
    act: Vec<f64>,
    /// pooled features, `cells x hidden`
    pooled: Vec<f64>,
}

/// `tanh` through one `exp`; absolute error stays at round-off level and it
/// is several times cheaper than the libm routine.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        x.signum()
    } else {
        let e = (2.0 * x).exp();
        (e - 1.0) / (e + 1.0)
    }
}

/// Pixels are centered on mid-gray before the convolution.
const INPUT_CENTER: f64 = 0.5;

/// Channel-major copy of the centered image with a one-pixel zero border.
fn pad_input(image: &Image) -> Vec<f64> {
    let (h, w, c_in) = (image.height, image.width, image.channels);
    let pw = w + 2;
    let mut padded = vec![0.0; c_in * (h + 2) * pw];
    for i in 0..h {
        for j in 0..w {
            for c in 0..c_in {
                padded[c * (h + 2) * pw + (i + 1) * pw + j + 1] =
                    image.pixels[(i * w + j) * c_in + c] as f64 - INPUT_CENTER;
            }
        }
    }
    padded
}

/// Stateless detector bound to an architecture.
#[derive(Debug, Clone)]
pub struct Detector {
    arch: ArchConfig,
    layout: Arc<Layout>,
}

impl Detector {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            layout: Arc::new(arch.layout()),
            arch,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Uniform in `[-b, b]` with `b = 1/sqrt(fan_in)` per layer.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut p = ParamVector::zeros(Arc::clone(&self.layout));
        let conv_fan_in = (self.arch.in_channels * KERNEL * KERNEL) as f64;
        let head_fan_in = self.arch.hidden as f64;
        for entry in &self.layout.entries {
            let fan_in = if entry.name.starts_with("conv") { conv_fan_in } else { head_fan_in };
            let bound = 1.0 / fan_in.sqrt();
            for v in &mut p.values[entry.offset..entry.offset + entry.len()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    fn check(&self, p: &ParamVector, image: &Image) -> Result<()> {
        if p.layout.as_ref() != self.layout.as_ref() || p.values.len() != self.layout.total_len() {
            return Err(Error::Layout(format!(
                "expected {} parameters in detector layout, got {}",
                self.layout.total_len(),
                p.values.len()
            )));
        }
        let a = &self.arch;
        if (image.height, image.width, image.channels) != (a.in_height, a.in_width, a.in_channels) {
            return Err(Error::Shape {
                expected: format!("{}x{}x{}", a.in_height, a.in_width, a.in_channels),
                got: format!("{}x{}x{}", image.height, image.width, image.channels),
            });
        }
        Ok(())
    }

    pub fn forward(&self, p: &ParamVector, image: &Image) -> Result<DetectorOutput> {
        self.check(p, image)?;
        Ok(self.forward_cached(p, image).0)
    }

    fn forward_cached(&self, p: &ParamVector, image: &Image) -> (DetectorOutput, ForwardCache) {
        let a = &self.arch;
        let (h, w, c_in, k_n) = (a.in_height, a.in_width, a.in_channels, a.hidden);
        let (g, stride, m) = (a.grid, a.stride(), a.num_classes);
        let conv_w = p.slice("conv.weight");
        let conv_b = p.slice("conv.bias");

        let padded = pad_input(image);
        let pw = w + 2;
        let mut act = vec![0.0; k_n * h * w];
        for k in 0..k_n {
            let wk = &conv_w[k * c_in * 9..(k + 1) * c_in * 9];
            let out_k = &mut act[k * h * w..(k + 1) * h * w];
            out_k.fill(conv_b[k]);
            for c in 0..c_in {
                let plane = &padded[c * (h + 2) * pw..(c + 1) * (h + 2) * pw];
                for u in 0..KERNEL {
                    for v in 0..KERNEL {
                        let wt = wk[(c * KERNEL + u) * KERNEL + v];
                        for i in 0..h {
                            let src = &plane[(i + u) * pw + v..(i + u) * pw + v + w];
                            let dst = &mut out_k[i * w..(i + 1) * w];
                            for (d, x) in dst.iter_mut().zip(src) {
                                *d += wt * x;
                            }
                        }
                    }
                }
            }
            for z in out_k.iter_mut() {
                *z = fast_tanh(*z);
            }
        }

        let cells = g * g;
        let inv_area = 1.0 / (stride * stride) as f64;
        let mut pooled = vec![0.0; cells * k_n];
        for k in 0..k_n {
            for i in 0..h {
                for j in 0..w {
                    let cell = (i / stride) * g + j / stride;
                    pooled[cell * k_n + k] += act[(k * h + i) * w + j];
                }
            }
        }
        for v in pooled.iter_mut() {
            *v *= inv_area;
        }

        let (cls_w, cls_b) = (p.slice("cls.weight"), p.slice("cls.bias"));
        let (obj_w, obj_b) = (p.slice("obj.weight"), p.slice("obj.bias"));
        let (box_w, box_b) = (p.slice("box.weight"), p.slice("box.bias"));
        let dot = |row: &[f64], f: &[f64]| row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();

        let mut out = DetectorOutput {
            grid: g,
            stride,
            num_classes: m,
            cls_logits: vec![0.0; cells * m],
            obj_logits: vec![0.0; cells],
            box_raw: vec![0.0; cells * 4],
            offsets: vec![0.0; cells * 4],
        };
        for cell in 0..cells {
            let f = &pooled[cell * k_n..(cell + 1) * k_n];
            for j in 0..m {
                out.cls_logits[cell * m + j] = cls_b[j] + dot(&cls_w[j * k_n..(j + 1) * k_n], f);
            }
            out.obj_logits[cell] = obj_b[0] + dot(obj_w, f);
            for n in 0..4 {
                let raw = box_b[n] + dot(&box_w[n * k_n..(n + 1) * k_n], f);
                out.box_raw[cell * 4 + n] = raw;
                out.offsets[cell * 4 + n] = softplus(raw);
            }
        }
        (out, ForwardCache { act, pooled })
    }

    fn backward(
        &self,
        p: &ParamVector,
        image: &Image,
        out: &DetectorOutput,
        cache: &ForwardCache,
        dout: &OutputGrad,
    ) -> ParamVector {
        let a = &self.arch;
        let (h, w, c_in, k_n) = (a.in_height, a.in_width, a.in_channels, a.hidden);
        let (g, stride, m) = (a.grid, a.stride(), a.num_classes);
        let cells = g * g;
        let mut grad = p.zeros_like();

        let (cls_w, obj_w, box_w) = (p.slice("cls.weight"), p.slice("obj.weight"), p.slice("box.weight"));
        let mut d_cls_w = vec![0.0; m * k_n];
        let mut d_cls_b = vec![0.0; m];
        let mut d_obj_w = vec![0.0; k_n];
        let mut d_obj_b = 0.0;
        let mut d_box_w = vec![0.0; 4 * k_n];
        let mut d_box_b = [0.0; 4];
        let mut d_pooled = vec![0.0; cells * k_n];

        for cell in 0..cells {
            let f = &cache.pooled[cell * k_n..(cell + 1) * k_n];
            let df = &mut d_pooled[cell * k_n..(cell + 1) * k_n];
            for j in 0..m {
                let d = dout.cls_logits[cell * m + j];
                if d == 0.0 {
                    continue;
                }
                d_cls_b[j] += d;
                for k in 0..k_n {
                    d_cls_w[j * k_n + k] += d * f[k];
                    df[k] += d * cls_w[j * k_n + k];
                }
            }
            let d = dout.obj_logits[cell];
            d_obj_b += d;
            for k in 0..k_n {
                d_obj_w[k] += d * f[k];
                df[k] += d * obj_w[k];
            }
            for n in 0..4 {
                let d_off = dout.offsets[cell * 4 + n];
                if d_off == 0.0 {
                    continue;
                }
                let d = d_off * sigmoid(out.box_raw[cell * 4 + n]);
                d_box_b[n] += d;
                for k in 0..k_n {
                    d_box_w[n * k_n + k] += d * f[k];
                    df[k] += d * box_w[n * k_n + k];
                }
            }
        }

        let inv_area = 1.0 / (stride * stride) as f64;
        let padded = pad_input(image);
        let pw = w + 2;
        let mut d_conv_w = vec![0.0; k_n * c_in * 9];
        let mut d_conv_b = vec![0.0; k_n];
        let mut dz = vec![0.0; h * w];
        for k in 0..k_n {
            for i in 0..h {
                for j in 0..w {
                    let cell = (i / stride) * g + j / stride;
                    let act = cache.act[(k * h + i) * w + j];
                    dz[i * w + j] = d_pooled[cell * k_n + k] * inv_area * (1.0 - act * act);
                }
            }
            d_conv_b[k] = dz.iter().sum();
            for c in 0..c_in {
                let plane = &padded[c * (h + 2) * pw..(c + 1) * (h + 2) * pw];
                for u in 0..KERNEL {
                    for v in 0..KERNEL {
                        let mut acc = 0.0;
                        for i in 0..h {
                            let src = &plane[(i + u) * pw + v..(i + u) * pw + v + w];
                            let d = &dz[i * w..(i + 1) * w];
                            acc += d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                        d_conv_w[((k * c_in + c) * KERNEL + u) * KERNEL + v] = acc;
                    }
                }
            }
        }

        grad.slice_mut("conv.weight").copy_from_slice(&d_conv_w);
        grad.slice_mut("conv.bias").copy_from_slice(&d_conv_b);
        grad.slice_mut("cls.weight").copy_from_slice(&d_cls_w);
        grad.slice_mut("cls.bias").copy_from_slice(&d_cls_b);
        grad.slice_mut("obj.weight").copy_from_slice(&d_obj_w);
        grad.slice_mut("obj.bias")[0] = d_obj_b;
        grad.slice_mut("box.weight").copy_from_slice(&d_box_w);
        grad.slice_mut("box.bias").copy_from_slice(&d_box_b);
        grad
    }

    /// Loss against explicit per-cell targets, with the exact parameter gradient.
    pub fn loss_and_grad(
        &self,
        p: &ParamVector,
        image: &Image,
        targets: &[Option<CellTarget>],
    ) -> Result<(LossTerms, ParamVector)> {
        self.check(p, image)?;
        let (out, cache) = self.forward_cached(p, image);
        let (terms, dout) = loss_from_output(&out, targets);
        if !terms.total().is_finite() {
            return Err(Error::NonFinite(format!("loss {terms:?}")));
        }
        let grad = self.backward(p, image, &out, &cache, &dout);
        if !grad.is_finite() {
            return Err(Error::NonFinite("loss gradient".into()));
        }
        Ok((terms, grad))
    }

    /// Weighted sum of several losses on one image. The forward pass is
    /// shared; returns the unweighted terms of each part and the gradient of
    /// the weighted sum.
    pub fn combined_loss(
        &self,
        p: &ParamVector,
        image: &Image,
        parts: &[(&[Option<CellTarget>], f64)],
    ) -> Result<(Vec<LossTerms>, ParamVector)> {
        self.check(p, image)?;
        let (out, cache) = self.forward_cached(p, image);
        let mut dout = OutputGrad::zeros_like(&out);
        let mut all_terms = Vec::with_capacity(parts.len());
        for (targets, weight) in parts {
            let (terms, d) = loss_from_output(&out, targets);
            if !terms.total().is_finite() {
                return Err(Error::NonFinite(format!("loss {terms:?}")));
            }
            dout.add_scaled(&d, *weight);
            all_terms.push(terms);
        }
        let grad = self.backward(p, image, &out, &cache, &dout);
        if !grad.is_finite() {
            return Err(Error::NonFinite("loss gradient".into()));
        }
        Ok((all_terms, grad))
    }

    pub fn supervised_loss(
        &self,
        p: &ParamVector,
        image: &Image,
        labels: &[GroundTruthObject],
    ) -> Result<(LossTerms, ParamVector)> {
        self.loss_and_grad(p, image, &assign_targets(&self.arch, labels))
    }

    /// Same functional form as [`Detector::supervised_loss`], with pseudo
    /// detections standing in for labels.
    pub fn unsupervised_loss(
        &self,
        p: &ParamVector,
        image: &Image,
        pseudo: &DetectionSet,
    ) -> Result<(LossTerms, ParamVector)> {
        self.supervised_loss(p, image, &pseudo.as_targets())
    }

    pub fn detect(&self, p: &ParamVector, image: &Image, cfg: &DecodeConfig) -> Result<DetectionSet> {
        Ok(decode(&self.forward(p, image)?, cfg))
    }
}

/// Which model (or label source) produced a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Model,
    RgbTeacher,
    ThermalTeacher,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub source: LabelSource,
    /// Row-major index of the grid cell that produced the detection.
    pub cell: usize,
}

/// Detections sorted by descending score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn as_targets(&self) -> Vec<GroundTruthObject> {
        self.detections
            .iter()
            .map(|d| GroundTruthObject {
                class_id: d.class_id,
                bbox: d.bbox,
            })
            .collect()
    }

    pub fn tagged(mut self, source: LabelSource) -> Self {
        for d in &mut self.detections {
            d.source = source;
        }
        self
    }

    pub fn from_ground_truth(objects: &[GroundTruthObject]) -> Self {
        DetectionSet {
            detections: objects
                .iter()
                .enumerate()
                .map(|(i, o)| Detection {
                    class_id: o.class_id,
                    score: 1.0,
                    bbox: o.bbox,
                    source: LabelSource::GroundTruth,
                    cell: i,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.score_threshold) && (0.0..=1.0).contains(&self.nms_iou) {
            Ok(())
        } else {
            Err(Error::config("decode thresholds must lie in [0, 1]"))
        }
    }
}

/// Orders by score descending, then by cell index ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell))
}

/// Greedy class-agnostic suppression over detections already in priority order.
pub fn nms(sorted: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        if kept.iter().all(|k| iou_unchecked(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Per-cell score `sigmoid(obj) * max softmax(cls)`, threshold, box from the
/// cell center and offsets, clip, then NMS.
pub fn decode(out: &DetectorOutput, cfg: &DecodeConfig) -> DetectionSet {
    let m = out.num_classes;
    let size = out.image_size();
    let mut cands = Vec::new();
    for cell in 0..out.grid * out.grid {
        let probs = softmax(&out.cls_logits[cell * m..(cell + 1) * m]);
        let (class_id, p_cls) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &p)| if p > best.1 { (j, p) } else { best });
        let score = sigmoid(out.obj_logits[cell]) * p_cls;
        if score < cfg.score_threshold {
            continue;
        }
        let (xc, yc) = out.cell_center(cell);
        let o = &out.offsets[cell * 4..cell * 4 + 4];
        let raw = BBox::from_corners(xc - o[0], yc - o[1], xc + o[2], yc + o[3]);
        if let Some(bbox) = raw.clip(size, size) {
            cands.push(Detection {
                class_id,
                score,
                bbox,
                source: LabelSource::Model,
                cell,
            });
        }
    }
    cands.sort_by(detection_order);
    DetectionSet {
        detections: nms(cands, cfg.nms_iou),
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: "D3T1", u32 LE JSON length, canonical arch JSON, u64 LE value
// count, f64 LE values.

const CHECKPOINT_MAGIC: &[u8; 4] = b"D3T1";

pub fn encode_checkpoint(arch: &ArchConfig, p: &ParamVector) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(arch)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * p.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for v in &p.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ArchConfig, ParamVector)> {
    let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let json_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json_end = 8usize.checked_add(json_len).ok_or_else(|| bad("length overflow"))?;
    if bytes.len() < json_end + 8 {
        return Err(bad("truncated header"));
    }
    let arch: ArchConfig = serde_json::from_slice(&bytes[8..json_end])?;
    let detector = Detector::new(arch)?;
    let count = u64::from_le_bytes(bytes[json_end..json_end + 8].try_into().unwrap()) as usize;
    let body = &bytes[json_end + 8..];
    if count != detector.layout.total_len() || body.len() != 8 * count {
        return Err(bad("value count does not match architecture"));
    }
    let mut p = ParamVector::zeros(Arc::clone(&detector.layout));
    for (v, chunk) in p.values.iter_mut().zip(body.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((arch, p))
}

pub fn save_checkpoint(path: &Path, arch: &ArchConfig, p: &ParamVector) -> Result<()> {
    let bytes = encode_checkpoint(arch, p)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchConfig, ParamVector)> {
    decode_checkpoint(&fs::read(path)?)
}
