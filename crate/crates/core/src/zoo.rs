//! The eight cell-level operators plus the down-/up-sample modules, all
//! width-slimmable and uniformly invokable by the supernet.

use crate::error::{DenasError, Result};
use crate::graph::{Graph, Parameter, Var};
use crate::tensor::TensorData;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Width menu numerators over 8: [8/8, 7/8, 6/8, 5/8, 4/8].
pub const WIDTH_MENU_NUM: [usize; 5] = [8, 7, 6, 5, 4];
pub const WIDTH_MENU_LEN: usize = 5;

/// Channel count for a menu index, ceiling to keep at least one channel.
pub fn menu_width(full: usize, idx: usize) -> usize {
    (full * WIDTH_MENU_NUM[idx]).div_ceil(8).max(1)
}

/// The fixed operator menu; order is the alpha index order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    ConvD1,
    ConvD2,
    ConvD3,
    ConvR,
    Skip,
    Ib,
    Hin,
    Swin,
}

pub const OPERATOR_MENU: [OperatorKind; 8] = [
    OperatorKind::ConvD1,
    OperatorKind::ConvD2,
    OperatorKind::ConvD3,
    OperatorKind::ConvR,
    OperatorKind::Skip,
    OperatorKind::Ib,
    OperatorKind::Hin,
    OperatorKind::Swin,
];

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::ConvD1 => "conv_d1",
            OperatorKind::ConvD2 => "conv_d2",
            OperatorKind::ConvD3 => "conv_d3",
            OperatorKind::ConvR => "conv_r",
            OperatorKind::Skip => "skip",
            OperatorKind::Ib => "ib",
            OperatorKind::Hin => "hin",
            OperatorKind::Swin => "swin",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        OPERATOR_MENU.iter().copied().find(|k| k.name() == s)
    }

    pub fn menu_index(&self) -> usize {
        OPERATOR_MENU.iter().position(|k| k == self).unwrap()
    }
}

fn kaiming(shape: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> TensorData {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
    TensorData { shape, data }
}

/// A convolution kernel whose leading-channel slices are themselves valid
/// kernels; slices share storage with the full kernel.
#[derive(Clone)]
pub struct SlimmableKernel {
    pub weight: Parameter,
    pub bias: Parameter,
    pub full_in: usize,
    pub full_out: usize,
    pub ksize: usize,
    pub dilation: usize,
}

impl SlimmableKernel {
    pub fn new(
        name: &str,
        full_in: usize,
        full_out: usize,
        ksize: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = Parameter::new(
            format!("{name}/weight"),
            kaiming([full_out, full_in, ksize, ksize], full_in * ksize * ksize, rng),
        );
        let bias = Parameter::new(format!("{name}/bias"), TensorData::zeros([1, full_out, 1, 1]));
        SlimmableKernel {
            weight,
            bias,
            full_in,
            full_out,
            ksize,
            dilation,
        }
    }

    pub fn width_in(&self, idx: usize) -> usize {
        menu_width(self.full_in, idx)
    }

    pub fn width_out(&self, idx: usize) -> usize {
        menu_width(self.full_out, idx)
    }

    /// Validate menu indices for `slice` / `apply_menu`.
    fn check_idx(i_in: usize, i_out: usize) -> Result<()> {
        if i_in >= WIDTH_MENU_LEN || i_out >= WIDTH_MENU_LEN {
            return Err(DenasError::arg(
                "slice_kernel",
                format!("menu index ({i_in}, {i_out}) out of range 0..=4"),
            ));
        }
        Ok(())
    }

    /// Materialize the leading-channel slice selected by a menu pair.
    /// This is a value copy for inspection; training goes through
    /// `apply_menu`, whose gradients accumulate into the full kernel.
    pub fn slice(&self, i_in: usize, i_out: usize) -> Result<TensorData> {
        Self::check_idx(i_in, i_out)?;
        let (ci, co) = (self.width_in(i_in), self.width_out(i_out));
        let full = self.weight.value();
        let mut out = TensorData::zeros([co, ci, self.ksize, self.ksize]);
        for oc in 0..co {
            for ic in 0..ci {
                for dh in 0..self.ksize {
                    for dw in 0..self.ksize {
                        *out.at_mut(oc, ic, dh, dw) = full.at(oc, ic, dh, dw);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Apply the convolution at explicit channel widths ("same" padding).
    pub fn apply_widths(&self, g: &mut Graph, x: Var, w_in: usize, w_out: usize) -> Result<Var> {
        let pad = self.dilation * (self.ksize - 1) / 2;
        let kv = g.param(&self.weight)?;
        let bv = g.param(&self.bias)?;
        g.conv2d_slice(x, kv, Some(bv), 1, self.dilation, pad, w_out, w_in)
    }

    /// Apply the convolution with widths selected by menu indices.
    pub fn apply_menu(&self, g: &mut Graph, x: Var, i_in: usize, i_out: usize) -> Result<Var> {
        Self::check_idx(i_in, i_out)?;
        self.apply_widths(g, x, self.width_in(i_in), self.width_out(i_out))
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

enum OpParams {
    Conv {
        kernel: SlimmableKernel,
        residual: bool,
    },
    Skip,
    Ib {
        f1: SlimmableKernel,
        f2: SlimmableKernel,
    },
    Hin {
        conv1: SlimmableKernel,
        conv2: SlimmableKernel,
        shortcut: SlimmableKernel,
    },
    Swin {
        wq: Parameter,
        wk: Parameter,
        wv: Parameter,
        wo: Parameter,
        mlp1: SlimmableKernel,
        mlp2: SlimmableKernel,
    },
}

/// Negative slope for in-cell activations (HIN-style default; the choice
/// is configuration, not a searched quantity).
pub const LEAKY_SLOPE: f64 = 0.2;

/// One instantiated cell operator at a full channel width; actual in/out
/// widths are chosen per application via the leading-channel rule.
pub struct OperatorInstance {
    pub kind: OperatorKind,
    pub full_width: usize,
    /// Cyclic window shift for SWIN (alternates 0 / window/2 by cell index).
    pub swin_shift: bool,
    params: OpParams,
}

impl OperatorInstance {
    pub fn new(
        kind: OperatorKind,
        full_width: usize,
        swin_shift: bool,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kind == OperatorKind::Ib && full_width % 2 != 0 {
            return Err(DenasError::arg("operator", "IB requires even channels"));
        }
        let c = full_width;
        let params = match kind {
            OperatorKind::ConvD1 => OpParams::Conv {
                kernel: SlimmableKernel::new(&format!("{name}/conv"), c, c, 3, 1, rng),
                residual: false,
            },
            OperatorKind::ConvD2 => OpParams::Conv {
                kernel: SlimmableKernel::new(&format!("{name}/conv"), c, c, 3, 2, rng),
                residual: false,
            },
            OperatorKind::ConvD3 => OpParams::Conv {
                kernel: SlimmableKernel::new(&format!("{name}/conv"), c, c, 3, 3, rng),
                residual: false,
            },
            OperatorKind::ConvR => OpParams::Conv {
                kernel: SlimmableKernel::new(&format!("{name}/conv"), c, c, 3, 1, rng),
                residual: true,
            },
            OperatorKind::Skip => OpParams::Skip,
            OperatorKind::Ib => OpParams::Ib {
                f1: SlimmableKernel::new(&format!("{name}/f1"), c / 2, c / 2, 3, 1, rng),
                f2: SlimmableKernel::new(&format!("{name}/f2"), c / 2, c / 2, 3, 1, rng),
            },
            OperatorKind::Hin => OpParams::Hin {
                conv1: SlimmableKernel::new(&format!("{name}/conv1"), c, c, 3, 1, rng),
                conv2: SlimmableKernel::new(&format!("{name}/conv2"), c, c, 3, 1, rng),
                shortcut: SlimmableKernel::new(&format!("{name}/shortcut"), c, c, 1, 1, rng),
            },
            OperatorKind::Swin => OpParams::Swin {
                wq: Parameter::new(format!("{name}/wq"), kaiming([1, c, c, 1], c, rng)),
                wk: Parameter::new(format!("{name}/wk"), kaiming([1, c, c, 1], c, rng)),
                wv: Parameter::new(format!("{name}/wv"), kaiming([1, c, c, 1], c, rng)),
                wo: Parameter::new(format!("{name}/wo"), kaiming([1, c, c, 1], c, rng)),
                mlp1: SlimmableKernel::new(&format!("{name}/mlp1"), c, c, 1, 1, rng),
                mlp2: SlimmableKernel::new(&format!("{name}/mlp2"), c, c, 1, 1, rng),
            },
        };
        Ok(OperatorInstance {
            kind,
            full_width,
            swin_shift,
            params,
        })
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        match &self.params {
            OpParams::Conv { kernel, .. } => kernel.parameters(),
            OpParams::Skip => vec![],
            OpParams::Ib { f1, f2 } => {
                let mut p = f1.parameters();
                p.extend(f2.parameters());
                p
            }
            OpParams::Hin {
                conv1,
                conv2,
                shortcut,
            } => {
                let mut p = conv1.parameters();
                p.extend(conv2.parameters());
                p.extend(shortcut.parameters());
                p
            }
            OpParams::Swin {
                wq,
                wk,
                wv,
                wo,
                mlp1,
                mlp2,
            } => {
                let mut p = vec![wq.clone(), wk.clone(), wv.clone(), wo.clone()];
                p.extend(mlp1.parameters());
                p.extend(mlp2.parameters());
                p
            }
        }
    }

    fn swin_window(h: usize, w: usize) -> usize {
        for cand in [4usize, 2] {
            if h % cand == 0 && w % cand == 0 && h >= cand && w >= cand {
                return cand;
            }
        }
        1
    }

    fn ib_halves(
        &self,
        g: &mut Graph,
        x: Var,
        w: usize,
        invert: bool,
    ) -> Result<Var> {
        let (f1, f2) = match &self.params {
            OpParams::Ib { f1, f2 } => (f1, f2),
            _ => return Err(DenasError::arg("invert_ib", "not an IB operator")),
        };
        if w % 2 != 0 {
            return Err(DenasError::arg("ib", format!("odd channel count {w}")));
        }
        let half = w / 2;
        let x1 = g.slice_c(x, 0, half)?;
        let x2 = g.slice_c(x, half, half)?;
        let f = {
            let t = f1.apply_widths(g, x1, half, half)?;
            let t = g.leaky_relu(t, LEAKY_SLOPE)?;
            f2.apply_widths(g, t, half, half)?
        };
        let y2 = if invert { g.sub(x2, f)? } else { g.add(x2, f)? };
        g.concat_c(&[x1, y2])
    }

    /// Apply the operator: `x` carries `w_in` channels, output `w_out`.
    /// Spatial size is preserved for all kinds.
    pub fn apply(&self, g: &mut Graph, x: Var, w_in: usize, w_out: usize) -> Result<Var> {
        if x.shape[1] != w_in {
            return Err(DenasError::shape(
                "operator_apply",
                format!("input {} channels, expected {w_in}", x.shape[1]),
            ));
        }
        if w_in > self.full_width || w_out > self.full_width {
            return Err(DenasError::arg(
                "operator_apply",
                format!(
                    "widths ({w_in}, {w_out}) exceed full width {}",
                    self.full_width
                ),
            ));
        }
        match &self.params {
            OpParams::Conv { kernel, residual } => {
                let y = kernel.apply_widths(g, x, w_in, w_out)?;
                if *residual {
                    let r = g.adjust_width(x, w_out)?;
                    g.add(y, r)
                } else {
                    Ok(y)
                }
            }
            OpParams::Skip => g.adjust_width(x, w_out),
            OpParams::Ib { .. } => {
                // odd sampled widths run at the next even width, sliced back
                let eff = w_out + (w_out % 2);
                if eff > self.full_width {
                    return Err(DenasError::arg(
                        "ib",
                        format!("effective width {eff} exceeds full {}", self.full_width),
                    ));
                }
                let xw = g.adjust_width(x, eff)?;
                let y = self.ib_halves(g, xw, eff, false)?;
                g.adjust_width(y, w_out)
            }
            OpParams::Hin {
                conv1,
                conv2,
                shortcut,
            } => {
                // odd sampled widths run at the next even width, sliced back
                let eff = w_out + (w_out % 2);
                if eff > self.full_width {
                    return Err(DenasError::arg(
                        "hin",
                        format!("effective width {eff} exceeds full {}", self.full_width),
                    ));
                }
                let half = eff / 2;
                let y = conv1.apply_widths(g, x, w_in, eff)?;
                let y1 = g.slice_c(y, 0, half)?;
                let y2 = g.slice_c(y, half, half)?;
                let n1 = g.instance_norm(y1, 1e-5)?;
                let cat = g.concat_c(&[n1, y2])?;
                let act = g.leaky_relu(cat, LEAKY_SLOPE)?;
                let main = conv2.apply_widths(g, act, eff, eff)?;
                let sc = shortcut.apply_widths(g, x, w_in, eff)?;
                let out = g.add(main, sc)?;
                g.adjust_width(out, w_out)
            }
            OpParams::Swin {
                wq,
                wk,
                wv,
                wo,
                mlp1,
                mlp2,
            } => {
                let xw = g.adjust_width(x, w_out)?;
                let window = Self::swin_window(x.shape[2], x.shape[3]);
                let shift = if self.swin_shift { window / 2 } else { 0 };
                let wqv = g.param(wq)?;
                let wkv = g.param(wk)?;
                let wvv = g.param(wv)?;
                let wov = g.param(wo)?;
                let attn = g.window_attention(xw, window, shift, wqv, wkv, wvv, wov)?;
                let h = mlp1.apply_widths(g, attn, w_out, w_out)?;
                let h = g.leaky_relu(h, LEAKY_SLOPE)?;
                let h = mlp2.apply_widths(g, h, w_out, w_out)?;
                g.add(attn, h)
            }
        }
    }

    /// Algebraic inverse of the additive-coupling IB.
    pub fn invert_ib(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let w = y.shape[1];
        self.ib_halves(g, y, w, true)
    }
}

/// Stride-2 3x3 convolution down-sample module; spatial halved, channels
/// doubled.
pub struct Downsample {
    pub kernel: SlimmableKernel,
}

impl Downsample {
    pub fn new(name: &str, in_width: usize, rng: &mut impl Rng) -> Self {
        Downsample {
            kernel: SlimmableKernel::new(name, in_width, in_width * 2, 3, 1, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [_, c, h, w] = x.shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DenasError::shape("downsample", format!("odd size {h}x{w}")));
        }
        let xw = g.adjust_width(x, self.kernel.full_in)?;
        let kv = g.param(&self.kernel.weight)?;
        let bv = g.param(&self.kernel.bias)?;
        let _ = c;
        g.conv2d_slice(xw, kv, Some(bv), 2, 1, 1, self.kernel.full_out, self.kernel.full_in)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.kernel.parameters()
    }
}

/// Pixel-shuffle + skip concatenation + 1x1 width-restoring convolution.
pub struct Upsample {
    pub proj: SlimmableKernel,
    pub target_width: usize,
}

impl Upsample {
    pub fn new(
        name: &str,
        low_width: usize,
        skip_width: usize,
        target_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cat = low_width / 4 + skip_width;
        Upsample {
            proj: SlimmableKernel::new(name, cat, target_width, 1, 1, rng),
            target_width,
        }
    }

    /// `x_low` at half spatial resolution, `x_skip` the last pre-downsample
    /// feature at the target resolution.
    pub fn apply(&self, g: &mut Graph, x_low: Var, x_skip: Var) -> Result<Var> {
        if x_low.shape[1] % 4 != 0 {
            return Err(DenasError::shape(
                "upsample",
                format!("{} low channels not divisible by 4", x_low.shape[1]),
            ));
        }
        let up = g.pixel_shuffle(x_low, 2)?;
        if up.shape[2] != x_skip.shape[2] || up.shape[3] != x_skip.shape[3] {
            return Err(DenasError::shape(
                "upsample",
                format!(
                    "shuffled {:?} vs skip {:?}",
                    up.shape, x_skip.shape
                ),
            ));
        }
        let cat = g.concat_c(&[up, x_skip])?;
        let catw = g.adjust_width(cat, self.proj.full_in)?;
        self.proj.apply_widths(g, catw, self.proj.full_in, self.target_width)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.proj.parameters()
    }
}

// ----------------------------------------------------------------------
// Toy models of the down-/up-sample module comparison
// ----------------------------------------------------------------------

/// Down/up module selection for the five toy variants.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ToyVariant {
    pub id: u8,
    pub down_conv_s2: bool,
    pub up: ToyUp,
    pub concat: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ToyUp {
    Bilinear,
    TransposedConv,
    PixelShuffle,
}

pub fn toy_variant(id: u8) -> Result<ToyVariant> {
    Ok(match id {
        1 => ToyVariant {
            id,
            down_conv_s2: false,
            up: ToyUp::Bilinear,
            concat: false,
        },
        2 => ToyVariant {
            id,
            down_conv_s2: false,
            up: ToyUp::Bilinear,
            concat: true,
        },
        3 => ToyVariant {
            id,
            down_conv_s2: true,
            up: ToyUp::Bilinear,
            concat: true,
        },
        4 => ToyVariant {
            id,
            down_conv_s2: true,
            up: ToyUp::TransposedConv,
            concat: true,
        },
        5 => ToyVariant {
            id,
            down_conv_s2: true,
            up: ToyUp::PixelShuffle,
            concat: true,
        },
        _ => return Err(DenasError::arg("toy_model", format!("invalid variant {id}"))),
    })
}

/// Sequential toy model: 2 convs, down-sample, `mid` convs, up-sample,
/// 2 convs, long input residual.
pub struct ToyModel {
    pub variant: ToyVariant,
    pub width: usize,
    head: Vec<SlimmableKernel>,
    down: SlimmableKernel,
    mid: Vec<SlimmableKernel>,
    up_tconv: Option<Parameter>,
    fuse: Option<SlimmableKernel>,
    tail: Vec<SlimmableKernel>,
}

impl ToyModel {
    pub fn new(
        variant_id: u8,
        in_ch: usize,
        width: usize,
        mid_convs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let variant = toy_variant(variant_id)?;
        let w = width;
        let mid_w = if variant.down_conv_s2 { 2 * w } else { w };
        let head = vec![
            SlimmableKernel::new("toy/head0", in_ch, w, 3, 1, rng),
            SlimmableKernel::new("toy/head1", w, w, 3, 1, rng),
        ];
        let down = if variant.down_conv_s2 {
            SlimmableKernel::new("toy/down", w, mid_w, 3, 1, rng)
        } else {
            // unused kernel slot for avg-pool variants
            SlimmableKernel::new("toy/down_unused", 1, 1, 1, 1, rng)
        };
        let mid = (0..mid_convs)
            .map(|i| SlimmableKernel::new(&format!("toy/mid{i}"), mid_w, mid_w, 3, 1, rng))
            .collect();
        let up_tconv = match variant.up {
            ToyUp::TransposedConv => Some(Parameter::new(
                "toy/up_tconv",
                kaiming([mid_w, w, 2, 2], mid_w * 4, rng),
            )),
            _ => None,
        };
        let up_ch = match variant.up {
            ToyUp::Bilinear => mid_w,
            ToyUp::TransposedConv => w,
            ToyUp::PixelShuffle => {
                if mid_w % 4 != 0 {
                    return Err(DenasError::arg("toy_model", "width must be divisible by 2"));
                }
                mid_w / 4
            }
        };
        let fuse = if variant.concat {
            Some(SlimmableKernel::new("toy/fuse", up_ch + w, w, 1, 1, rng))
        } else if up_ch != w {
            Some(SlimmableKernel::new("toy/fuse", up_ch, w, 1, 1, rng))
        } else {
            None
        };
        let tail = vec![
            SlimmableKernel::new("toy/tail0", w, w, 3, 1, rng),
            SlimmableKernel::new("toy/tail1", w, in_ch, 3, 1, rng),
        ];
        Ok(ToyModel {
            variant,
            width,
            head,
            down,
            mid,
            up_tconv,
            fuse,
            tail,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = self.width;
        let mut t = x;
        for k in &self.head {
            t = k.apply_widths(g, t, t.shape[1], w)?;
            t = g.leaky_relu(t, LEAKY_SLOPE)?;
        }
        let pre_down = t; // the m-th layer feature
        let mid_w = if self.variant.down_conv_s2 { 2 * w } else { w };
        t = if self.variant.down_conv_s2 {
            let kv = g.param(&self.down.weight)?;
            let bv = g.param(&self.down.bias)?;
            g.conv2d_slice(t, kv, Some(bv), 2, 1, 1, mid_w, w)?
        } else {
            g.avg_pool2(t)?
        };
        for k in &self.mid {
            t = k.apply_widths(g, t, mid_w, mid_w)?;
            t = g.leaky_relu(t, LEAKY_SLOPE)?;
        }
        t = match self.variant.up {
            ToyUp::Bilinear => g.bilinear_up2(t)?,
            ToyUp::PixelShuffle => g.pixel_shuffle(t, 2)?,
            ToyUp::TransposedConv => {
                let kv = g.param(self.up_tconv.as_ref().unwrap())?;
                g.conv_transpose2d_s2(t, kv)?
            }
        };
        if self.variant.concat {
            t = g.concat_c(&[t, pre_down])?;
        }
        if let Some(fuse) = &self.fuse {
            t = fuse.apply_widths(g, t, t.shape[1], w)?;
        }
        t = self.tail[0].apply_widths(g, t, w, w)?;
        t = g.leaky_relu(t, LEAKY_SLOPE)?;
        t = self.tail[1].apply_widths(g, t, w, x.shape[1])?;
        g.add(t, x)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut p: Vec<Parameter> = vec![];
        for k in &self.head {
            p.extend(k.parameters());
        }
        if self.variant.down_conv_s2 {
            p.extend(self.down.parameters());
        }
        for k in &self.mid {
            p.extend(k.parameters());
        }
        if let Some(t) = &self.up_tconv {
            p.push(t.clone());
        }
        if let Some(f) = &self.fuse {
            p.extend(f.parameters());
        }
        for k in &self.tail {
            p.extend(k.parameters());
        }
        p
    }

    pub fn has_concat(&self) -> bool {
        self.variant.concat
    }
}
