//! The complete matting model: base network, patch selection and refiner
//! sharing one parameter store.

use alloc::format;
use alloc::string::String;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basenet::{BaseNet, BaseNetConfig, BaseOutputGrads, BaseOutputs, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::imagecore::{downsample, recover_foreground_batch};
use crate::losses::{compute_losses, LossMode, LossValues, Targets};
use crate::nn::{AdamConfig, Ctx, GroupRates, ParameterStore};
use crate::refiner::{resample_error, select_patches, Kernel, PatchIndexSet, RefineConfig, Refiner, Selection, CELL};
use crate::tensor::Tensor4;

/// Architecture and initialization seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub base: BaseNetConfig,
    pub kernel: Kernel,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base: BaseNetConfig::default(),
            kernel: Kernel::K3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            base: BaseNetConfig::tiny(),
            kernel: Kernel::K3,
            seed,
        }
    }

    /// Canonical text form of everything that determines parameter layout.
    pub fn canonical(&self) -> String {
        let [a, b, c, d] = self.base.stage_channels;
        let k = match self.kernel {
            Kernel::K3 => 3,
            Kernel::K1 => 1,
        };
        format!("stages={a},{b},{c},{d};aspp={};refine_kernel={k}", self.base.aspp_channels)
    }

    /// FNV-1a hash of [`ModelConfig::canonical`]. The seed is excluded: it
    /// only affects initial values, not compatibility.
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Number of cells covering `fraction` of an `n x h x w` batch.
pub fn k_for_area_fraction(n: usize, h: usize, w: usize, fraction: f64) -> usize {
    let cells = n * (h / CELL) * (w / CELL);
    (libm::round(fraction.clamp(0.0, 1.0) * cells as f64) as usize).min(cells)
}

/// Refined-area fraction used at high definition: 16 * 5000 / (1920 * 1080).
pub const HD_REFINE_FRACTION: f64 = 16.0 * 5000.0 / (1920.0 * 1080.0);

/// Outputs of a full pipeline pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[n, 1, h, w]` in `[0, 1]`.
    pub alpha: Tensor4,
    /// `[n, 3, h, w]` foreground residual in `[-1, 1]`.
    pub fgr: Tensor4,
    /// Recovered foreground `clamp(fgr + image)`.
    pub fg: Tensor4,
    pub coarse: BaseOutputs,
    pub selected: PatchIndexSet,
}

/// Network inputs and full-resolution ground truth for one training step.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub image: &'a Tensor4,
    pub background: &'a Tensor4,
    pub alpha: &'a Tensor4,
    pub fg: &'a Tensor4,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub base: BaseNet,
    pub refiner: Refiner,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.base.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let base = BaseNet::new(config.base, &mut store, &mut rng)?;
        let refiner = Refiner::new(config.kernel, &mut store, &mut rng);
        Ok(Self {
            config,
            store,
            base,
            refiner,
        })
    }

    /// Side lengths must be multiples of this for a downsampling factor `c`.
    pub fn size_multiple(c: usize) -> usize {
        OUTPUT_STRIDE * c
    }

    fn check_full(image: &Tensor4, background: &Tensor4, c: usize) -> Result<()> {
        image.expect_same("model", background)?;
        let m = Self::size_multiple(c);
        for (dim, v) in [("height", image.h()), ("width", image.w())] {
            if v % m != 0 {
                return Err(Error::NotDivisible {
                    op: "model",
                    dim,
                    value: v,
                    multiple: m,
                });
            }
        }
        Ok(())
    }

    /// Base network on `1/c` downsampled inputs.
    pub fn coarse(&self, image: &Tensor4, background: &Tensor4, c: usize, ctx: &mut Ctx) -> Result<BaseOutputs> {
        let (i_c, b_c) = (downsample(image, c)?, downsample(background, c)?);
        Ok(self.base.forward(&self.store, &i_c, &b_c, ctx)?.0)
    }

    /// Full pipeline in eval mode. Side lengths must be multiples of `16 c`.
    pub fn predict(&self, image: &Tensor4, background: &Tensor4, rc: &RefineConfig) -> Result<Prediction> {
        rc.validate()?;
        Self::check_full(image, background, rc.c)?;
        let mut ctx = Ctx::eval();
        let coarse = self.coarse(image, background, rc.c, &mut ctx)?;
        let e4 = resample_error(&coarse.err, image.h(), image.w(), rc.c)?;
        let selected = select_patches(&e4, rc.selection);
        let (out, _) = self
            .refiner
            .forward(&self.store, &coarse, image, background, &selected, rc.c, &mut ctx)?;
        let (fg, _) = recover_foreground_batch(&out.fgr, image)?;
        Ok(Prediction {
            alpha: out.alpha,
            fgr: out.fgr,
            fg,
            coarse,
            selected,
        })
    }

    /// [`Model::predict`] for arbitrary sizes: pads bottom and right by
    /// replicating edges up to a multiple of `16 c`, then crops back.
    pub fn predict_padded(&self, image: &Tensor4, background: &Tensor4, rc: &RefineConfig) -> Result<Prediction> {
        image.expect_same("predict_padded", background)?;
        let m = Self::size_multiple(rc.c);
        let (h, w) = (image.h(), image.w());
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            return self.predict(image, background, rc);
        }
        let p = self.predict(&pad_replicate(image, ph, pw), &pad_replicate(background, ph, pw), rc)?;
        Ok(Prediction {
            alpha: crop_top_left(&p.alpha, h, w),
            fgr: crop_top_left(&p.fgr, h, w),
            fg: crop_top_left(&p.fg, h, w),
            coarse: p.coarse,
            selected: p.selected,
        })
    }

    /// Forward and backward for one batch in train mode. Parameter gradients
    /// are accumulated into the store (zeroed first); the returned context
    /// holds batch statistics for [`Ctx::commit`].
    pub fn forward_backward(&mut self, inputs: &TrainInputs<'_>, mode: LossMode, rc: &RefineConfig) -> Result<(LossValues, Ctx)> {
        rc.validate()?;
        Self::check_full(inputs.image, inputs.background, rc.c)?;
        self.store.zero_grads();
        let mut ctx = Ctx::train();
        let c = rc.c;
        let (i_c, b_c) = (downsample(inputs.image, c)?, downsample(inputs.background, c)?);
        let (coarse, base_cache) = self.base.forward(&self.store, &i_c, &b_c, &mut ctx)?;
        let base_cache = base_cache.expect("train mode cache");
        let targets = Targets {
            image: inputs.image,
            alpha: inputs.alpha,
            fg: inputs.fg,
        };
        let refined = match mode {
            LossMode::BaseOnly => None,
            LossMode::Joint => {
                let (h, w) = (inputs.image.h(), inputs.image.w());
                let e4 = resample_error(&coarse.err, h, w, c)?;
                let idx = select_patches(&e4, rc.selection);
                let (out, cache) =
                    self.refiner
                        .forward(&self.store, &coarse, inputs.image, inputs.background, &idx, c, &mut ctx)?;
                Some((out, cache.expect("train mode cache")))
            }
        };
        let (values, grads) = compute_losses(
            &coarse,
            refined.as_ref().map(|(o, _)| (&o.alpha, &o.fgr)),
            &targets,
            mode,
            c,
        )?;
        if !values.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.store.step() });
        }
        let mut base_grads = grads.base;
        if let (Some((_, cache)), Some(da), Some(df)) = (&refined, &grads.refined_alpha, &grads.refined_fgr) {
            let g = self.refiner.backward(&mut self.store, cache, da, df)?;
            merge(&mut base_grads, g);
        }
        self.base.backward(&mut self.store, &base_cache, &base_grads)?;
        Ok((values, ctx))
    }

    /// One optimizer step. Nothing is modified when the loss or any gradient
    /// is not finite.
    pub fn train_step(
        &mut self,
        inputs: &TrainInputs<'_>,
        mode: LossMode,
        rc: &RefineConfig,
        rates: &GroupRates,
        adam: &AdamConfig,
    ) -> Result<LossValues> {
        let (values, ctx) = self.forward_backward(inputs, mode, rc)?;
        self.store.adam_step(rates, adam)?;
        ctx.commit(&mut self.store);
        Ok(values)
    }

    /// Loss without touching gradients or statistics (train-mode batch norm).
    pub fn loss(&self, inputs: &TrainInputs<'_>, mode: LossMode, rc: &RefineConfig) -> Result<LossValues> {
        let mut copy = self.clone();
        Ok(copy.forward_backward(inputs, mode, rc)?.0)
    }
}

fn add_opt(dst: &mut Option<Tensor4>, src: Option<Tensor4>) {
    match (dst.as_mut(), src) {
        (Some(d), Some(s)) => d.add_assign(&s),
        (None, Some(s)) => *dst = Some(s),
        _ => {}
    }
}

fn merge(dst: &mut BaseOutputGrads, src: BaseOutputGrads) {
    add_opt(&mut dst.alpha, src.alpha);
    add_opt(&mut dst.fgr, src.fgr);
    add_opt(&mut dst.err, src.err);
    add_opt(&mut dst.hid, src.hid);
}

/// Extends a tensor to `h x w` by repeating its last row and column.
pub fn pad_replicate(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_fn(x.n(), x.c(), h, w, |b, c, y, xx| x.at(b, c, y.min(x.h() - 1), xx.min(x.w() - 1)))
}

pub fn crop_top_left(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_fn(x.n(), x.c(), h, w, |b, c, y, xx| x.at(b, c, y, xx))
}

/// Refinement settings for a fraction of the image area.
pub fn area_selection(n: usize, h: usize, w: usize, fraction: f64) -> Selection {
    Selection::TopK(k_for_area_fraction(n, h, w, fraction))
}
