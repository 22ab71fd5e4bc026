//! Coarse network: 6-channel stem, output-stride-16 backbone, ASPP and a
//! four-block decoder emitting alpha, foreground residual, error and hidden
//! features at the input resolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imagecore::{resize, resize_backward, ResizeMode};
use crate::nn::act::{
    broadcast_hw, broadcast_hw_backward, clamp_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward,
};
use crate::nn::conv::ConvCache;
use crate::nn::layers::CbrCache;
use crate::nn::{Cbr, Conv, ConvSpec, Ctx, Group, Padding, ParameterStore};
use crate::tensor::Tensor4;

pub const ASPP_DILATIONS: [usize; 3] = [3, 6, 9];
pub const DECODER_CHANNELS: [usize; 3] = [128, 64, 48];
pub const HIDDEN_CHANNELS: usize = 32;
/// alpha, foreground residual, error, hidden
pub const OUTPUT_SPLIT: [usize; 4] = [1, 3, 1, HIDDEN_CHANNELS];
pub const OUTPUT_STRIDE: usize = 16;
/// Weight scale of output layers relative to the ReLU-gain init.
pub const OUTPUT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseNetConfig {
    /// Channels at strides 2, 4, 8 and 16.
    pub stage_channels: [usize; 4],
    pub aspp_channels: usize,
}

impl Default for BaseNetConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            aspp_channels: 64,
        }
    }
}

impl BaseNetConfig {
    pub fn tiny() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            aspp_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.aspp_channels == 0 {
            return Err(Error::InvalidConfig("base network channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Coarse predictions, all at the base network's input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseOutputs {
    /// `[n, 1, h, w]`, clamped to `[0, 1]`.
    pub alpha: Tensor4,
    /// `[n, 3, h, w]`, unclamped residual.
    pub fgr: Tensor4,
    /// `[n, 1, h, w]`, clamped to `[0, 1]`.
    pub err: Tensor4,
    /// `[n, 32, h, w]`, after ReLU.
    pub hid: Tensor4,
}

/// Gradients with respect to the four base outputs. Missing entries are zero.
#[derive(Debug, Clone, Default)]
pub struct BaseOutputGrads {
    pub alpha: Option<Tensor4>,
    pub fgr: Option<Tensor4>,
    pub err: Option<Tensor4>,
    pub hid: Option<Tensor4>,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Cbr,
    body: Option<Cbr>,
}

#[derive(Debug, Clone)]
struct Aspp {
    branches: Vec<Cbr>,
    pool_conv: Conv,
    project: Cbr,
}

#[derive(Debug, Clone)]
pub struct BaseNet {
    pub config: BaseNetConfig,
    stages: [Stage; 4],
    aspp: Aspp,
    decoder: [Cbr; 3],
    head: Conv,
}

#[derive(Debug)]
struct StageCache {
    down: CbrCache,
    body: Option<CbrCache>,
}

#[derive(Debug)]
struct AsppCache {
    branches: Vec<CbrCache>,
    pool_in_hw: (usize, usize),
    pool_conv: ConvCache,
    pool_out: Tensor4,
    project: CbrCache,
}

#[derive(Debug)]
struct DecoderStep {
    up_from: (usize, usize),
    x_channels: usize,
}

/// State saved by [`BaseNet::forward`] in train mode.
#[derive(Debug)]
pub struct BaseCache {
    stages: Vec<StageCache>,
    aspp: AsppCache,
    steps: Vec<DecoderStep>,
    decoder: Vec<CbrCache>,
    head_step: DecoderStep,
    head: ConvCache,
    raw: Tensor4,
}

fn conv3(in_ch: usize, out_ch: usize) -> ConvSpec {
    ConvSpec::new(in_ch, out_ch, 3, Padding::Same)
}

fn up2(x: &Tensor4) -> Tensor4 {
    resize(x, x.h() * 2, x.w() * 2, ResizeMode::Bilinear)
}

impl BaseNet {
    /// Allocates and initializes every parameter in `store`.
    pub fn new(config: BaseNetConfig, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [c2, c4, c8, c16] = config.stage_channels;
        let bb = Group::Backbone;
        let stages = [
            Stage {
                down: Cbr::new(store, "backbone.stem", conv3(6, c2).stride(2), bb, rng),
                body: None,
            },
            Stage {
                down: Cbr::new(store, "backbone.stage1.down", conv3(c2, c4).stride(2), bb, rng),
                body: Some(Cbr::new(store, "backbone.stage1.body", conv3(c4, c4), bb, rng)),
            },
            Stage {
                down: Cbr::new(store, "backbone.stage2.down", conv3(c4, c8).stride(2), bb, rng),
                body: Some(Cbr::new(store, "backbone.stage2.body", conv3(c8, c8), bb, rng)),
            },
            Stage {
                down: Cbr::new(store, "backbone.stage3.down", conv3(c8, c16).stride(2), bb, rng),
                // dilated in place of a further stride-2 block
                body: Some(Cbr::new(store, "backbone.stage3.body", conv3(c16, c16).dilation(2), bb, rng)),
            },
        ];

        let a = config.aspp_channels;
        let ag = Group::Aspp;
        let mut branches = Vec::with_capacity(4);
        branches.push(Cbr::new(store, "aspp.branch0", ConvSpec::new(c16, a, 1, Padding::Same), ag, rng));
        for (i, &d) in ASPP_DILATIONS.iter().enumerate() {
            branches.push(Cbr::new(store, &format!("aspp.branch{}", i + 1), conv3(c16, a).dilation(d), ag, rng));
        }
        let pool_conv = Conv::new(store, "aspp.pool", ConvSpec::new(c16, a, 1, Padding::Same).with_bias(), ag, rng);
        let project = Cbr::new(store, "aspp.project", ConvSpec::new(5 * a, a, 1, Padding::Same), ag, rng);
        let aspp = Aspp {
            branches,
            pool_conv,
            project,
        };

        let dg = Group::Decoder;
        let [d0, d1, d2] = DECODER_CHANNELS;
        let decoder = [
            Cbr::new(store, "decoder.block0", conv3(a + c8, d0), dg, rng),
            Cbr::new(store, "decoder.block1", conv3(d0 + c4, d1), dg, rng),
            Cbr::new(store, "decoder.block2", conv3(d1 + c2, d2), dg, rng),
        ];
        let out_ch: usize = OUTPUT_SPLIT.iter().sum();
        let head = Conv::new(store, "decoder.head", conv3(d2 + 6, out_ch).with_bias(), dg, rng);
        // start alpha and error inside their clamp range so gradients flow
        let mut bias = vec![0.0; out_ch];
        bias[0] = 0.5;
        bias[4] = 0.5;
        head.init_output(store, OUTPUT_GAIN, &bias);
        Ok(Self {
            config,
            stages,
            aspp,
            decoder,
            head,
        })
    }

    pub fn head_out_channels(&self) -> usize {
        self.head.spec.out_ch
    }

    pub fn stem_in_channels(&self) -> usize {
        self.stages[0].down.conv.spec.in_ch
    }

    pub fn check_input(image: &Tensor4, background: &Tensor4) -> Result<()> {
        image.expect_same("base_forward", background)?;
        if image.c() != 3 {
            return Err(crate::error::shape_err("base_forward", "3-channel images", format!("{}", image.c())));
        }
        if image.h() % OUTPUT_STRIDE != 0 {
            return Err(Error::NotDivisible {
                op: "base_forward",
                dim: "height",
                value: image.h(),
                multiple: OUTPUT_STRIDE,
            });
        }
        if image.w() % OUTPUT_STRIDE != 0 {
            return Err(Error::NotDivisible {
                op: "base_forward",
                dim: "width",
                value: image.w(),
                multiple: OUTPUT_STRIDE,
            });
        }
        Ok(())
    }

    /// Backbone features at strides 2, 4, 8 and 16. Exposed for shape tests.
    pub fn backbone(&self, store: &ParameterStore, input: &Tensor4, ctx: &mut Ctx) -> Result<Vec<Tensor4>> {
        Ok(self.backbone_inner(store, input, ctx)?.0)
    }

    fn backbone_inner(
        &self,
        store: &ParameterStore,
        input: &Tensor4,
        ctx: &mut Ctx,
    ) -> Result<(Vec<Tensor4>, Vec<StageCache>)> {
        let mut feats = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        let mut x = input.clone();
        for stage in &self.stages {
            let (y, down) = stage.down.forward(store, &x, ctx)?;
            x = y;
            let body = match &stage.body {
                Some(b) => {
                    let (y, c) = b.forward(store, &x, ctx)?;
                    x = y;
                    c
                }
                None => None,
            };
            if let Some(down) = down {
                caches.push(StageCache { down, body });
            }
            feats.push(x.clone());
        }
        Ok((feats, caches))
    }

    /// Runs the coarse network on `[n,3,h,w]` image and background batches.
    /// The cache is returned in train mode only.
    pub fn forward(
        &self,
        store: &ParameterStore,
        image: &Tensor4,
        background: &Tensor4,
        ctx: &mut Ctx,
    ) -> Result<(BaseOutputs, Option<BaseCache>)> {
        Self::check_input(image, background)?;
        let input = Tensor4::concat_channels(&[image, background])?;
        let (feats, stage_caches) = self.backbone_inner(store, &input, ctx)?;
        let train = ctx.is_train();

        // ASPP
        let f16 = &feats[3];
        let mut branch_outs = Vec::with_capacity(5);
        let mut branch_caches = Vec::new();
        for b in &self.aspp.branches {
            let (y, c) = b.forward(store, f16, ctx)?;
            branch_outs.push(y);
            branch_caches.extend(c);
        }
        let pooled = global_avg_pool(f16);
        let (pc, pool_conv_cache) = self.aspp.pool_conv.forward(store, &pooled, ctx)?;
        let pool_out = relu(&pc);
        branch_outs.push(broadcast_hw(&pool_out, f16.h(), f16.w()));
        let refs: Vec<&Tensor4> = branch_outs.iter().collect();
        let cat = Tensor4::concat_channels(&refs)?;
        let (mut x, project_cache) = self.aspp.project.forward(store, &cat, ctx)?;

        // decoder
        let skips = [&feats[2], &feats[1], &feats[0]];
        let mut steps = Vec::with_capacity(3);
        let mut dec_caches = Vec::with_capacity(3);
        for (block, skip) in self.decoder.iter().zip(skips) {
            let step = DecoderStep {
                up_from: (x.h(), x.w()),
                x_channels: x.c(),
            };
            let up = up2(&x);
            let cat = Tensor4::concat_channels(&[&up, skip])?;
            let (y, c) = block.forward(store, &cat, ctx)?;
            x = y;
            steps.push(step);
            dec_caches.extend(c);
        }
        let head_step = DecoderStep {
            up_from: (x.h(), x.w()),
            x_channels: x.c(),
        };
        let up = up2(&x);
        let cat = Tensor4::concat_channels(&[&up, &input])?;
        let (raw, head_cache) = self.head.forward(store, &cat, ctx)?;

        let parts = raw.split_channels(&OUTPUT_SPLIT)?;
        let outputs = BaseOutputs {
            alpha: parts[0].map(|v| v.clamp(0.0, 1.0)),
            fgr: parts[1].clone(),
            err: parts[2].map(|v| v.clamp(0.0, 1.0)),
            hid: relu(&parts[3]),
        };
        let cache = if train {
            Some(BaseCache {
                stages: stage_caches,
                aspp: AsppCache {
                    branches: branch_caches,
                    pool_in_hw: (f16.h(), f16.w()),
                    pool_conv: pool_conv_cache.expect("train mode keeps caches"),
                    pool_out,
                    project: project_cache.expect("train mode keeps caches"),
                },
                steps,
                decoder: dec_caches,
                head_step,
                head: head_cache.expect("train mode keeps caches"),
                raw,
            })
        } else {
            None
        };
        Ok((outputs, cache))
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&self, store: &mut ParameterStore, cache: &BaseCache, grads: &BaseOutputGrads) -> Result<()> {
        let raw_parts = cache.raw.split_channels(&OUTPUT_SPLIT)?;
        let zeros = |t: &Tensor4| Tensor4::zeros_like(t);
        let d_alpha = match &grads.alpha {
            Some(g) => clamp_backward(g, &raw_parts[0], 0.0, 1.0),
            None => zeros(&raw_parts[0]),
        };
        let d_fgr = grads.fgr.clone().unwrap_or_else(|| zeros(&raw_parts[1]));
        let d_err = match &grads.err {
            Some(g) => clamp_backward(g, &raw_parts[2], 0.0, 1.0),
            None => zeros(&raw_parts[2]),
        };
        let d_hid = match &grads.hid {
            Some(g) => relu_backward(g, &raw_parts[3].map(|v| v.max(0.0))),
            None => zeros(&raw_parts[3]),
        };
        let d_raw = Tensor4::concat_channels(&[&d_alpha, &d_fgr, &d_err, &d_hid])?;

        // head
        let d_cat = self.head.backward(store, &d_raw, &cache.head, true)?.expect("input grad");
        let hs = &cache.head_step;
        let parts = d_cat.split_channels(&[hs.x_channels, 6])?;
        let mut d_x = resize_backward(&parts[0], hs.up_from.0, hs.up_from.1, ResizeMode::Bilinear);

        // decoder blocks in reverse, collecting skip gradients
        let mut d_skips: Vec<Tensor4> = Vec::with_capacity(3);
        for i in (0..3).rev() {
            let d_cat = self.decoder[i]
                .backward(store, &d_x, &cache.decoder[i], true)?
                .expect("input grad");
            let step = &cache.steps[i];
            let skip_c = d_cat.c() - step.x_channels;
            let parts = d_cat.split_channels(&[step.x_channels, skip_c])?;
            d_x = resize_backward(&parts[0], step.up_from.0, step.up_from.1, ResizeMode::Bilinear);
            d_skips.push(parts[1].clone());
        }
        // d_skips now holds strides 2, 4, 8 in that order
        let d_cat = self
            .aspp
            .project
            .backward(store, &d_x, &cache.aspp.project, true)?
            .expect("input grad");
        let a = self.config.aspp_channels;
        let parts = d_cat.split_channels(&[a; 5])?;
        let mut d_f16: Option<Tensor4> = None;
        for (i, branch) in self.aspp.branches.iter().enumerate() {
            let d = branch
                .backward(store, &parts[i], &cache.aspp.branches[i], true)?
                .expect("input grad");
            match &mut d_f16 {
                Some(acc) => acc.add_assign(&d),
                None => d_f16 = Some(d),
            }
        }
        let d_pool = broadcast_hw_backward(&parts[4]);
        let d_pool = relu_backward(&d_pool, &cache.aspp.pool_out);
        let d_pooled = self
            .aspp
            .pool_conv
            .backward(store, &d_pool, &cache.aspp.pool_conv, true)?
            .expect("input grad");
        let (ph, pw) = cache.aspp.pool_in_hw;
        let mut d_feat = d_f16.expect("aspp has branches");
        d_feat.add_assign(&global_avg_pool_backward(&d_pooled, ph, pw));

        // backbone in reverse; stage i output also feeds skip i (for i < 3)
        for i in (0..4).rev() {
            if i < 3 {
                d_feat.add_assign(&d_skips[i]);
            }
            let stage = &self.stages[i];
            let sc = &cache.stages[i];
            if let (Some(body), Some(bc)) = (&stage.body, &sc.body) {
                d_feat = body.backward(store, &d_feat, bc, true)?.expect("input grad");
            }
            let need = i > 0;
            match stage.down.backward(store, &d_feat, &sc.down, need)? {
                Some(d) => d_feat = d,
                None => break,
            }
        }
        Ok(())
    }
}
