//! Multi-view state-space enhancement.
//!
//! Feature maps of several views are flattened into one token sequence.
//! Each Feature Enhancement Block (FEB) normalizes the tokens, routes and
//! sorts them by semantic class, runs a selective scan whose `b`, `c` and
//! step projections are gated by the degradation embedding and whose output
//! map is offset by semantic prompts, restores the original order and adds
//! the result back, followed by a token-wise MLP. Blocks are arranged in a
//! two-scale pyramid; the coarse stage hands its final scan state and prompt
//! offsets to the last stage.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Mlp};
use crate::rng::SeededRng;
use crate::router::{Permutation, RouterConfig, SemanticRouter};
use crate::ssm::{ScanMode, ScanModulation, SelectiveScan};
use crate::tensor::{concat, ParamId, ParamStore, Tape, Tensor, Var};

/// A `B × V × C × H × W` feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub views: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        batch: usize,
        views: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if batch * views * channels * height * width == 0
            || data.len() != batch * views * channels * height * width
        {
            return Err(Error::shape(
                "feature-map",
                format!(
                    "{batch}x{views}x{channels}x{height}x{width} with {} values",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            batch,
            views,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout {
            views: self.views,
            height: self.height,
            width: self.width,
        }
    }

    /// Tokens `[L, C]` of batch item `b`, view-major then row-major spatial.
    pub fn tokens(&self, b: usize) -> Result<Tensor> {
        let (v, c, h, w) = (self.views, self.channels, self.height, self.width);
        let base = b * v * c * h * w;
        let mut out = vec![0.0; v * h * w * c];
        for vi in 0..v {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(vi * h * w + p) * c + ci] = self.data[base + (vi * c + ci) * h * w + p];
                }
            }
        }
        Tensor::new(vec![v * h * w, c], out)
    }

    /// `[B, L, C]` token tensor.
    pub fn flatten(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.data.len());
        for b in 0..self.batch {
            data.extend_from_slice(self.tokens(b)?.data());
        }
        Tensor::new(
            vec![self.batch, self.layout().tokens(), self.channels],
            data,
        )
    }

    /// Inverse of [`FeatureMap::flatten`].
    pub fn unflatten(tokens: &Tensor, layout: Layout) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 || s[1] != layout.tokens() {
            return Err(Error::shape("unflatten", format!("{s:?} for {layout:?}")));
        }
        let (batch, c) = (s[0], s[2]);
        let (v, h, w) = (layout.views, layout.height, layout.width);
        let mut data = vec![0.0; tokens.len()];
        for b in 0..batch {
            let base = b * v * c * h * w;
            for vi in 0..v {
                for ci in 0..c {
                    for p in 0..h * w {
                        data[base + (vi * c + ci) * h * w + p] =
                            tokens.data()[base + (vi * h * w + p) * c + ci];
                    }
                }
            }
        }
        Self::new(batch, v, c, h, w, data)
    }
}

/// Spatial arrangement of a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub views: usize,
    pub height: usize,
    pub width: usize,
}

impl Layout {
    pub fn tokens(&self) -> usize {
        self.views * self.height * self.width
    }

    pub fn per_view(&self) -> usize {
        self.height * self.width
    }

    pub fn token_index(&self, view: usize, y: usize, x: usize) -> usize {
        view * self.per_view() + y * self.width + x
    }

    /// The layout after a 2× downsample.
    pub fn coarse(&self) -> Result<Layout> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::shape(
                "downsample",
                format!("{}x{} is not divisible by 2", self.height, self.width),
            ));
        }
        Ok(Layout {
            views: self.views,
            height: self.height / 2,
            width: self.width / 2,
        })
    }

    /// For every fine token, the index of the coarse token covering it.
    pub fn parent_index(&self) -> Result<Vec<usize>> {
        let c = self.coarse()?;
        let mut idx = Vec::with_capacity(self.tokens());
        for v in 0..self.views {
            for y in 0..self.height {
                for x in 0..self.width {
                    idx.push(c.token_index(v, y / 2, x / 2));
                }
            }
        }
        Ok(idx)
    }
}

/// Strided 2×2 average of tokens `[L, C]` laid out as `layout`.
pub fn downsample<'t>(x: Var<'t>, layout: Layout) -> Result<Var<'t>> {
    let c = layout.coarse()?;
    let ch = x.shape()[1];
    x.reshape([layout.views, c.height, 2, c.width, 2, ch])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([c.tokens(), 4, ch])?
        .mean_axis(1)
}

/// Nearest-neighbour 2× upsample of coarse tokens to `fine`.
pub fn upsample<'t>(x: Var<'t>, fine: Layout) -> Result<Var<'t>> {
    x.gather(&fine.parent_index()?)
}

/// Component switches mirroring the ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub deg_injection: bool,
    pub semantic_reorder: bool,
    pub multi_view: bool,
    pub feedback_hidden: bool,
    pub feedback_offset: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            deg_injection: true,
            semantic_reorder: true,
            multi_view: true,
            feedback_hidden: true,
            feedback_offset: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MvSsemConfig {
    pub channels: usize,
    pub state: usize,
    pub z_dim: usize,
    pub head_hidden: usize,
    pub router: RouterConfig,
    /// Blocks in the fine, coarse and final stages.
    pub blocks: [usize; 3],
    pub ablation: Ablation,
}

impl Default for MvSsemConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            state: 16,
            z_dim: 128,
            head_hidden: 64,
            router: RouterConfig::default(),
            blocks: [2, 2, 2],
            ablation: Ablation::default(),
        }
    }
}

/// `φ_B`, `φ_C`, `φ_Δ`: two-layer MLPs from the embedding to gates
/// `2·sigmoid(·)` in `(0, 2)`. Their last layers start at zero, so the gates
/// start at exactly 1.
#[derive(Clone, Debug)]
pub struct ModulationHeads {
    pub b: Mlp,
    pub c: Mlp,
    pub step: Mlp,
}

/// Gate vectors for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Gates<'t> {
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub step: Var<'t>,
}

impl ModulationHeads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &MvSsemConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (z, h) = (config.z_dim, config.head_hidden);
        Ok(Self {
            b: Mlp::new(
                store,
                &format!("{name}.phi_b"),
                (z, h, config.state),
                Init::Zeros,
                rng,
            )?,
            c: Mlp::new(
                store,
                &format!("{name}.phi_c"),
                (z, h, config.state),
                Init::Zeros,
                rng,
            )?,
            step: Mlp::new(
                store,
                &format!("{name}.phi_step"),
                (z, h, config.channels),
                Init::Zeros,
                rng,
            )?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.b.params();
        v.extend(self.c.params());
        v.extend(self.step.params());
        v
    }

    /// Gates from an embedding `[1, z_dim]`.
    pub fn gates<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>) -> Result<Gates<'t>> {
        let gate = |mlp: &Mlp| -> Result<Var<'t>> {
            let out = mlp.forward(tape, store, z)?;
            let n = out.shape()[1];
            out.sigmoid()?.scale(2.0)?.reshape([n])
        };
        Ok(Gates {
            b: gate(&self.b)?,
            c: gate(&self.c)?,
            step: gate(&self.step)?,
        })
    }
}

/// What one stage hands to the next: final scan states (one per scanned
/// sequence) and the prompt offset field in original token order.
#[derive(Clone, Debug)]
pub struct CrossState<'t> {
    pub hidden: Vec<Var<'t>>,
    /// `[L, state]`
    pub offset: Var<'t>,
    pub layout: Layout,
}

impl<'t> CrossState<'t> {
    /// Resamples the offset field to a finer layout.
    pub fn upsampled(&self, fine: Layout) -> Result<CrossState<'t>> {
        if fine.coarse()? != self.layout {
            return Err(Error::shape(
                "cross-state",
                format!("{:?} is not the coarse of {fine:?}", self.layout),
            ));
        }
        Ok(CrossState {
            hidden: self.hidden.clone(),
            offset: upsample(self.offset, fine)?,
            layout: fine,
        })
    }
}

/// Per-block debugging output.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    /// Semantic class of every token, original order.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Feb {
    pub norm: LayerNorm,
    pub router: SemanticRouter,
    pub heads: ModulationHeads,
    pub scan: SelectiveScan,
    pub out_proj: Linear,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
}

/// Inputs shared by all blocks of one forward pass.
pub struct FebContext<'a, 't> {
    pub layout: Layout,
    /// `[1, z_dim]`, absent when degradation injection is off.
    pub z: Option<Var<'t>>,
    pub ablation: Ablation,
    pub mode: ScanMode,
    pub rng: Option<&'a mut SeededRng>,
}

impl Feb {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &MvSsemConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let c = config.channels;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            router: SemanticRouter::new(
                store,
                &format!("{name}.router"),
                c,
                config.state,
                config.router,
                rng,
            )?,
            heads: ModulationHeads::new(store, &format!("{name}.heads"), config, rng)?,
            scan: SelectiveScan::new(store, &format!("{name}.scan"), c, config.state, rng)?,
            out_proj: Linear::new(
                store,
                &format!("{name}.out_proj"),
                c,
                c,
                Init::Zeros,
                true,
                rng,
            )?,
            mlp_norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), c)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                (c, 2 * c, c),
                Init::Zeros,
                rng,
            )?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.norm.gamma, self.norm.beta];
        v.extend(self.router.params());
        v.extend(self.heads.params());
        v.extend(self.scan.params());
        v.extend(self.out_proj.params());
        v.extend([self.mlp_norm.gamma, self.mlp_norm.beta]);
        v.extend(self.mlp.params());
        v
    }

    /// One block over tokens `x` (`[L, C]`).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        ctx: &mut FebContext<'_, 't>,
        cross: Option<&CrossState<'t>>,
    ) -> Result<(Var<'t>, CrossState<'t>, BlockTrace)> {
        let layout = ctx.layout;
        if x.shape() != [layout.tokens(), self.scan.channels] {
            return Err(Error::shape(
                "feature-enhancement-block",
                format!("tokens {:?} for layout {layout:?}", x.shape()),
            ));
        }
        let ab = ctx.ablation;
        let u = self.norm.forward(tape, store, x)?;
        let gates = match (ab.deg_injection, ctx.z) {
            (true, Some(z)) => Some(self.heads.gates(tape, store, z)?),
            _ => None,
        };
        let (sequences, len) = if ab.multi_view {
            (1, layout.tokens())
        } else {
            (layout.views, layout.per_view())
        };
        if let Some(c) = cross {
            if c.offset.shape()[0] != layout.tokens()
                || (ab.feedback_hidden && c.hidden.len() != sequences)
            {
                return Err(Error::shape(
                    "cross-state",
                    "does not match the receiving block",
                ));
            }
        }

        let mut outputs = Vec::with_capacity(sequences);
        let mut hidden = Vec::with_capacity(sequences);
        let mut offsets = Vec::with_capacity(sequences);
        let mut classes = Vec::with_capacity(layout.tokens());
        for s in 0..sequences {
            let seq = if sequences == 1 {
                u
            } else {
                u.slice(0, s * len, len)?
            };
            let routing = self
                .router
                .route(tape, store, seq, ctx.rng.as_deref_mut())?;
            let perm = if ab.semantic_reorder {
                routing.permutation.clone()
            } else {
                Permutation::identity(len)
            };
            let mut c_offset = perm.apply(routing.prompts)?;
            let mut init_state = None;
            if let Some(c) = cross {
                if ab.feedback_offset {
                    let off = if sequences == 1 {
                        c.offset
                    } else {
                        c.offset.slice(0, s * len, len)?
                    };
                    c_offset = c_offset.add(perm.apply(off)?)?;
                }
                if ab.feedback_hidden {
                    init_state = Some(c.hidden[s]);
                }
            }
            let m = ScanModulation {
                gate_b: gates.map(|g| g.b),
                gate_c: gates.map(|g| g.c),
                gate_step: gates.map(|g| g.step),
                c_offset: Some(c_offset),
                init_state,
            };
            let out = self
                .scan
                .forward(tape, store, perm.apply(seq)?, &m, ctx.mode)?;
            outputs.push(perm.restore(out.y)?);
            hidden.push(out.final_state);
            offsets.push(routing.prompts);
            classes.extend(routing.classes);
        }
        let join = |v: Vec<Var<'t>>| {
            if v.len() == 1 {
                Ok(v[0])
            } else {
                concat(&v, 0)
            }
        };
        let y = join(outputs)?;
        let x = x.add(self.out_proj.forward(tape, store, y)?)?;
        let x = x.add(
            self.mlp
                .forward(tape, store, self.mlp_norm.forward(tape, store, x)?)?,
        )?;
        let state = CrossState {
            hidden,
            offset: join(offsets)?,
            layout,
        };
        Ok((x, state, BlockTrace { classes }))
    }
}

/// Token statistics of one block output, for the feature dump.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStats {
    pub stage: usize,
    pub block: usize,
    pub mean: f64,
    pub variance: f64,
    pub class_histogram: Vec<usize>,
}

impl BlockStats {
    fn new(stage: usize, block: usize, x: &Tensor, classes: &[usize], k: usize) -> Self {
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let variance = x
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let mut class_histogram = vec![0; k];
        for &c in classes {
            class_histogram[c] += 1;
        }
        Self {
            stage,
            block,
            mean,
            variance,
            class_histogram,
        }
    }
}

/// Plain-text rendering of block statistics.
pub fn format_stats(stats: &[BlockStats]) -> String {
    let mut out = String::from("# stage\tblock\tmean\tvariance\tclass-histogram\n");
    for s in stats {
        let hist: Vec<String> = s.class_histogram.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6e}\t{:.6e}\t{}",
            s.stage,
            s.block,
            s.mean,
            s.variance,
            hist.join(",")
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct MvSsem {
    pub config: MvSsemConfig,
    pub stages: [Vec<Feb>; 3],
    pub out: Linear,
}

impl MvSsem {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: MvSsemConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut stage = |i: usize| -> Result<Vec<Feb>> {
            (0..config.blocks[i])
                .map(|b| {
                    Feb::new(
                        store,
                        &format!("{name}.stage{}.block{b}", i + 1),
                        &config,
                        rng,
                    )
                })
                .collect()
        };
        let stages = [stage(0)?, stage(1)?, stage(2)?];
        let out = Linear::new(
            store,
            &format!("{name}.out"),
            config.channels,
            config.channels,
            Init::Zeros,
            true,
            rng,
        )?;
        Ok(Self {
            config,
            stages,
            out,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.stages.iter().flatten().flat_map(Feb::params).collect();
        v.extend(self.out.params());
        v
    }

    /// Enhances tokens `[L, C]` of one batch item. `z` is the pooled
    /// embedding `[1, z_dim]`; `rng` supplies routing noise (absent: none).
    #[allow(clippy::too_many_arguments)]
    pub fn enhance<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: Var<'t>,
        layout: Layout,
        z: Option<Var<'t>>,
        mode: ScanMode,
        rng: Option<&mut SeededRng>,
        mut stats: Option<&mut Vec<BlockStats>>,
    ) -> Result<Var<'t>> {
        let coarse = layout.coarse()?;
        let k = self.config.router.classes;
        let mut ctx = FebContext {
            layout,
            z,
            ablation: self.config.ablation,
            mode,
            rng,
        };
        let mut run_stage = |i: usize,
                             x: Var<'t>,
                             ctx: &mut FebContext<'_, 't>,
                             mut cross: Option<CrossState<'t>>|
         -> Result<(Var<'t>, Option<CrossState<'t>>)> {
            let mut x = x;
            let mut last = None;
            for (b, block) in self.stages[i].iter().enumerate() {
                let (y, state, trace) = block.forward(tape, store, x, ctx, cross.as_ref())?;
                if let Some(s) = stats.as_deref_mut() {
                    s.push(BlockStats::new(i + 1, b, &y.value(), &trace.classes, k));
                }
                cross = None;
                x = y;
                last = Some(state);
            }
            Ok((x, last))
        };

        let (x1, _) = run_stage(0, tokens, &mut ctx, None)?;
        let pooled = downsample(x1, layout)?;
        ctx.layout = coarse;
        let (x2, coarse_state) = run_stage(1, pooled, &mut ctx, None)?;
        let skip = x1.add(upsample(x2.sub(pooled)?, layout)?)?;
        ctx.layout = layout;
        let cross = match coarse_state {
            Some(c)
                if self.config.ablation.feedback_hidden || self.config.ablation.feedback_offset =>
            {
                Some(c.upsampled(layout)?)
            }
            _ => None,
        };
        let (x3, _) = run_stage(2, skip, &mut ctx, cross)?;
        x3.add(self.out.forward(tape, store, x3)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> MvSsemConfig {
        MvSsemConfig {
            channels: 6,
            state: 3,
            z_dim: 4,
            head_hidden: 5,
            router: RouterConfig {
                classes: 3,
                d_inner: 5,
                temperature: 1.0,
                hard: true,
            },
            blocks: [1, 1, 1],
            ablation: Ablation::default(),
        }
    }

    #[test]
    fn flatten_layout_and_round_trip() {
        let data: Vec<f64> = (0..2 * 2 * 3 * 2 * 3).map(|i| i as f64).collect();
        let f = FeatureMap::new(2, 2, 3, 2, 3, data).unwrap();
        let t = f.flatten().unwrap();
        assert_eq!(t.shape(), &[2, 12, 3]);
        assert_eq!(f.layout().token_index(1, 0, 2), 8);
        // token 8 of batch 0, channel 1 is view 1, channel 1, pixel (0, 2)
        assert_eq!(t.data()[8 * 3 + 1], f.data[(3 + 1) * 6 + 2]);
        assert_eq!(FeatureMap::unflatten(&t, f.layout()).unwrap(), f);
    }

    #[test]
    fn pooling_bookkeeping() {
        let layout = Layout {
            views: 2,
            height: 2,
            width: 4,
        };
        assert_eq!(
            layout.parent_index().unwrap(),
            vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(vec![16, 1], |i| i as f64).unwrap())
            .unwrap();
        let d = downsample(x, layout).unwrap();
        assert_eq!(d.value().data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = upsample(d, layout).unwrap();
        assert_eq!(u.value().data()[5], 2.5);
        assert!(Layout {
            views: 1,
            height: 3,
            width: 4
        }
        .coarse()
        .is_err());
    }

    #[test]
    fn fresh_network_is_the_identity() {
        let mut store = ParamStore::new();
        let cfg = small_config();
        let net = MvSsem::new(&mut store, "mv", cfg, &mut SeededRng::new(1)).unwrap();
        let layout = Layout {
            views: 2,
            height: 4,
            width: 4,
        };
        let mut rng = SeededRng::new(2);
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(vec![32, 6], |_| rng.normal()).unwrap())
            .unwrap();
        let z = tape
            .constant(Tensor::from_fn(vec![1, 4], |_| rng.normal()).unwrap())
            .unwrap();
        let y = net
            .enhance(
                &tape,
                &store,
                x,
                layout,
                Some(z),
                ScanMode::Sequential,
                Some(&mut rng),
                None,
            )
            .unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn neutral_heads_give_unit_gates() {
        let mut store = ParamStore::new();
        let cfg = small_config();
        let heads = ModulationHeads::new(&mut store, "h", &cfg, &mut SeededRng::new(3)).unwrap();
        let tape = Tape::new();
        let z = tape
            .constant(Tensor::from_fn(vec![1, 4], |i| i as f64 - 1.5).unwrap())
            .unwrap();
        let g = heads.gates(&tape, &store, z).unwrap();
        assert!(g.b.value().data().iter().all(|&v| v == 1.0));
        assert_eq!(g.step.shape(), vec![6]);
    }
}
