//! The TMS-Net architecture: a wavelet encoder shared by three view
//! decoders, plus the TMS-Net3 variant with one encoder per view.
//!
//! Encoder layer order for base width `C`:
//!
//! ```text
//! R0(1->C) WA1 Wp1 R1(C->2C) WA2 Wp2 R2(2C->4C) WA3 Wp3 R3(4C->8C) Wp4 R4(8C->8C)
//! ```
//!
//! Skips are the full-resolution R0 output and the four subbands of every
//! pooling layer. Decoder branch `b` starts at scale `1/2^b`: branches 1..=4
//! adapt the subbands of pooling layer `b` (branch 4 takes the R4 output as
//! its low band), then alternate unpooling with the decoder's shared
//! residual layer of each resolution until full resolution. Branch 0 applies
//! the full-resolution shared layer to the R0 output. Branch outputs are
//! summed and passed through a head residual module, a 1x1 convolution and
//! a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tms_autograd::{Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::ViewAxis;
use crate::wavelet::{wavelet_pool, wavelet_unpool, SubbandVars};

/// Input slices must be divisible by `2^POOL_LEVELS`.
pub const POOL_LEVELS: usize = 4;
pub const BRANCHES: usize = POOL_LEVELS + 1;
pub const INPUT_MULTIPLE: usize = 1 << POOL_LEVELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One encoder referenced by all three views.
    Shared,
    /// Three disjoint encoders, one per view (TMS-Net3).
    Independent3,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Variant::Shared),
            "independent3" => Ok(Variant::Independent3),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Shared => "shared",
            Variant::Independent3 => "independent3",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Base width `C`.
    pub channels: usize,
    pub variant: Variant,
    pub standard_view: ViewAxis,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            variant: Variant::Shared,
            standard_view: ViewAxis::Axial,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel count after encoder stage `k` (0 = stem).
    pub fn stage_channels(&self, k: usize) -> usize {
        (self.channels << k).min(self.channels * 8)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }
}

/// Weight initialization scheme for one convolution.
#[derive(Clone, Copy)]
enum Init {
    He,
    /// He scaled by 0.1 so residual branches start close to the skip path.
    HeDamped,
    Unit,
}

struct Builder<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    registered: Vec<ParamId>,
}

impl<T: Element> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Result<Conv> {
        let fan_in = (cin * k * k) as f64;
        let std = match init {
            Init::He => (2.0 / fan_in).sqrt(),
            Init::HeDamped => 0.1 * (2.0 / fan_in).sqrt(),
            Init::Unit => (1.0 / fan_in).sqrt(),
        };
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = cout * cin * k * k;
        let w: Vec<T> = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut self.rng))).collect();
        let weight = self.store.register(format!("{name}/weight"), Tensor::new(vec![cout, cin, k, k], w)?)?;
        let bias = self.store.register(format!("{name}/bias"), Tensor::zeros(vec![cout]))?;
        self.registered.extend([weight, bias]);
        Ok(Conv {
            weight,
            bias,
            pad: k / 2,
        })
    }

    fn residual(&mut self, name: &str, cin: usize, cout: usize) -> Result<ResidualModule> {
        Ok(ResidualModule {
            conv0: self.conv(&format!("{name}/conv0"), cin, cout, 3, Init::He)?,
            conv1: self.conv(&format!("{name}/conv1"), cout, cout, 3, Init::HeDamped)?,
            proj: if cin != cout {
                Some(self.conv(&format!("{name}/proj"), cin, cout, 1, Init::Unit)?)
            } else {
                None
            },
            cin,
            cout,
        })
    }

    fn take(&mut self) -> Vec<ParamId> {
        std::mem::take(&mut self.registered)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pad: usize,
}

impl Conv {
    fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        Ok(tape.conv2d(x, w, Some(b), 1, self.pad)?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `skip(x) + relu(conv1(relu(conv0(x))))`, where `skip` is the identity or
/// a 1x1 projection when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualModule {
    pub conv0: Conv,
    pub conv1: Conv,
    pub proj: Option<Conv>,
    pub cin: usize,
    pub cout: usize,
}

impl ResidualModule {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv0.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.conv1.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        Ok(tape.add(skip, h)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv0.params().to_vec();
        v.extend(self.conv1.params());
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v
    }
}

/// Pool, one residual module per subband, unpool, plus the module input.
#[derive(Clone, Debug)]
pub struct WaveletAnalysisModule {
    /// Indexed by band: ll, lh, hl, hh.
    pub bands: [ResidualModule; 4],
}

impl WaveletAnalysisModule {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = wavelet_pool(tape, x)?;
        let processed = SubbandVars {
            ll: self.bands[0].forward(tape, store, s.ll)?,
            lh: self.bands[1].forward(tape, store, s.lh)?,
            hl: self.bands[2].forward(tape, store, s.hl)?,
            hh: self.bands[3].forward(tape, store, s.hh)?,
        };
        let y = wavelet_unpool(tape, &processed)?;
        Ok(tape.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
pub enum EncoderLayer {
    Residual(ResidualModule),
    WaveletAnalysis(WaveletAnalysisModule),
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Census {
    pub residual: usize,
    pub wavelet_analysis: usize,
    pub pool: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    params: Vec<ParamId>,
}

/// Encoder outputs consumed by a decoder.
#[derive(Clone, Debug)]
pub struct Skips {
    /// Full-resolution stem output.
    pub full: Var,
    /// Subbands of each pooling layer, finest first.
    pub pooled: Vec<SubbandVars>,
    /// Output of the last residual module.
    pub deepest: Var,
}

impl Encoder {
    fn build<T: Element>(b: &mut Builder<'_, T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = |k| cfg.stage_channels(k);
        let mut layers = vec![EncoderLayer::Residual(b.residual(&format!("{prefix}/r0"), 1, c(0))?)];
        for stage in 1..=POOL_LEVELS {
            let width = c(stage - 1);
            if stage < POOL_LEVELS {
                let band = |b: &mut Builder<'_, T>, name: &str| b.residual(&format!("{prefix}/wa{stage}/{name}"), width, width);
                let bands = [band(b, "ll")?, band(b, "lh")?, band(b, "hl")?, band(b, "hh")?];
                layers.push(EncoderLayer::WaveletAnalysis(WaveletAnalysisModule { bands }));
            }
            layers.push(EncoderLayer::Pool);
            layers.push(EncoderLayer::Residual(b.residual(
                &format!("{prefix}/r{stage}"),
                width,
                c(stage),
            )?));
        }
        Ok(Self {
            layers,
            params: b.take(),
        })
    }

    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for l in &self.layers {
            match l {
                EncoderLayer::Residual(_) => c.residual += 1,
                EncoderLayer::WaveletAnalysis(_) => c.wavelet_analysis += 1,
                EncoderLayer::Pool => c.pool += 1,
            }
        }
        c
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Skips> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Geometry(format!("encoder expects [N, 1, H, W], got {shape:?}")));
        }
        for &d in &shape[2..] {
            if d % INPUT_MULTIPLE != 0 || d == 0 {
                return Err(Error::Indivisible {
                    dim: d,
                    factor: INPUT_MULTIPLE,
                });
            }
        }
        let mut h = x;
        let mut full = None;
        let mut pooled = Vec::with_capacity(POOL_LEVELS);
        for layer in &self.layers {
            h = match layer {
                EncoderLayer::Residual(r) => {
                    let y = r.forward(tape, store, h)?;
                    full.get_or_insert(y);
                    y
                }
                EncoderLayer::WaveletAnalysis(wa) => wa.forward(tape, store, h)?,
                EncoderLayer::Pool => {
                    let s = wavelet_pool(tape, h)?;
                    pooled.push(s);
                    s.ll
                }
            };
        }
        Ok(Skips {
            full: full.ok_or_else(|| Error::Config("encoder has no residual module".into()))?,
            pooled,
            deepest: h,
        })
    }
}

/// Low- and high-frequency residual modules feeding a branch's first
/// unpooling.
#[derive(Clone, Debug)]
pub struct FeatureAdaptation {
    pub low: ResidualModule,
    /// Consumes `lh, hl, hh` concatenated on the channel axis.
    pub high: ResidualModule,
}

#[derive(Clone, Debug)]
pub struct Branch {
    /// Scale exponent: the branch starts at `1/2^level` resolution.
    pub level: usize,
    pub adapt: Option<FeatureAdaptation>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub branches: Vec<Branch>,
    /// Shared residual layer per resolution level (0 = full resolution).
    pub shared: Vec<ResidualModule>,
    pub head: ResidualModule,
    pub out: Conv,
    params: Vec<ParamId>,
}

impl Decoder {
    fn build<T: Element>(b: &mut Builder<'_, T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut shared = Vec::with_capacity(POOL_LEVELS);
        for level in 0..POOL_LEVELS {
            shared.push(b.residual(&format!("{prefix}/shared/res{level}"), c, c)?);
        }
        let mut branches = vec![Branch { level: 0, adapt: None }];
        for level in 1..=POOL_LEVELS {
            let skip_c = cfg.stage_channels(level - 1);
            let low_in = if level == POOL_LEVELS {
                cfg.stage_channels(POOL_LEVELS)
            } else {
                skip_c
            };
            let adapt = FeatureAdaptation {
                low: b.residual(&format!("{prefix}/branch{level}/adapt/low"), low_in, c)?,
                high: b.residual(&format!("{prefix}/branch{level}/adapt/high"), 3 * skip_c, 3 * c)?,
            };
            branches.push(Branch {
                level,
                adapt: Some(adapt),
            });
        }
        let head = b.residual(&format!("{prefix}/head"), c, c)?;
        let out = b.conv(&format!("{prefix}/out"), c, 1, 1, Init::Unit)?;
        Ok(Self {
            branches,
            shared,
            head,
            out,
            params: b.take(),
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Shared residual layers a branch runs through, in execution order.
    pub fn branch_residuals(&self, branch: usize) -> Vec<&ResidualModule> {
        let level = self.branches[branch].level;
        (0..level.max(1)).rev().map(|l| &self.shared[l]).collect()
    }

    fn branch_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        branch: &Branch,
        skips: &Skips,
    ) -> Result<Var> {
        let Some(adapt) = &branch.adapt else {
            return self.shared[0].forward(tape, store, skips.full);
        };
        let level = branch.level;
        let s = skips
            .pooled
            .get(level - 1)
            .ok_or_else(|| Error::Geometry(format!("missing skip at scale 1/{}", 1 << level)))?;
        let low_in = if level == POOL_LEVELS { skips.deepest } else { s.ll };
        let low = adapt.low.forward(tape, store, low_in)?;
        let highs = tape.concat(&s.highs(), 1)?;
        let high = adapt.high.forward(tape, store, highs)?;
        let c = tape.shape(low)[1];
        let subbands = SubbandVars {
            ll: low,
            lh: tape.narrow(high, 1, 0, c)?,
            hl: tape.narrow(high, 1, c, c)?,
            hh: tape.narrow(high, 1, 2 * c, c)?,
        };
        let mut h = wavelet_unpool(tape, &subbands)?;
        for l in (0..level).rev() {
            h = self.shared[l].forward(tape, store, h)?;
            if l > 0 {
                let zero = tape.constant(Tensor::zeros(tape.shape(h).to_vec()))?;
                h = wavelet_unpool(
                    tape,
                    &SubbandVars {
                        ll: h,
                        lh: zero,
                        hl: zero,
                        hh: zero,
                    },
                )?;
            }
        }
        Ok(h)
    }

    /// Logits before the final sigmoid.
    pub fn logits<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, skips: &Skips) -> Result<Var> {
        let mut sum = None;
        for branch in &self.branches {
            let y = self.branch_forward(tape, store, branch, skips)?;
            sum = Some(match sum {
                None => y,
                Some(acc) => tape.add(acc, y)?,
            });
        }
        let sum = sum.ok_or_else(|| Error::Config("decoder has no branches".into()))?;
        let h = self.head.forward(tape, store, sum)?;
        self.out.forward(tape, store, h)
    }
}

/// Parameters and structure of one TMS-Net.
#[derive(Clone, Debug)]
pub struct TmsNet<T: Element = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoders: Vec<Encoder>,
    decoders: [Decoder; 3],
}

impl<T: Element> TmsNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            registered: Vec::new(),
        };
        let encoders = match config.variant {
            Variant::Shared => vec![Encoder::build(&mut b, "encoder", &config)?],
            Variant::Independent3 => ViewAxis::ALL
                .iter()
                .map(|v| Encoder::build(&mut b, &format!("encoder_{v}"), &config))
                .collect::<Result<_>>()?,
        };
        let decoders = [
            Decoder::build(&mut b, "decoder_axial", &config)?,
            Decoder::build(&mut b, "decoder_coronal", &config)?,
            Decoder::build(&mut b, "decoder_sagittal", &config)?,
        ];
        Ok(Self {
            config,
            store,
            encoders,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoders(&self) -> &[Encoder] {
        &self.encoders
    }

    pub fn encoder(&self, view: ViewAxis) -> &Encoder {
        match self.config.variant {
            Variant::Shared => &self.encoders[0],
            Variant::Independent3 => &self.encoders[view.index()],
        }
    }

    pub fn decoder(&self, view: ViewAxis) -> &Decoder {
        &self.decoders[view.index()]
    }

    /// Parameters of every encoder.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoders.iter().flat_map(|e| e.params().iter().copied()).collect()
    }

    pub fn decoder_params(&self, view: ViewAxis) -> &[ParamId] {
        self.decoder(view).params()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Runs the view's encoder and decoder, returning logits `[N, 1, H, W]`.
    pub fn logits(&self, tape: &mut Tape<T>, view: ViewAxis, x: Var) -> Result<Var> {
        let skips = self.encoder(view).forward(tape, &self.store, x)?;
        self.decoder(view).logits(tape, &self.store, &skips)
    }

    /// Probabilities in `(0, 1)` with the input's shape.
    pub fn forward(&self, tape: &mut Tape<T>, view: ViewAxis, x: Var) -> Result<Var> {
        let z = self.logits(tape, view, x)?;
        Ok(tape.sigmoid(z)?)
    }

    /// Inference on a batch of slices `[N, 1, H, W]`.
    pub fn predict(&self, view: ViewAxis, slices: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::without_param_grads();
        let x = tape.input(slices, false)?;
        let y = self.forward(&mut tape, view, x)?;
        Ok(tape.value(y).clone())
    }
}
