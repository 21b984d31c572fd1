//! Semantic routing: tokens are assigned to one of `K` learned classes with
//! a Gumbel-softmax, stably sorted by class so that semantically similar
//! tokens become neighbours in the scan, and given per-token prompts that
//! offset the scan's output map.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Mlp};
use crate::rng::SeededRng;
use crate::tensor::{argmax, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterConfig {
    /// Number of semantic classes `K`.
    pub classes: usize,
    /// Width of the semantic embedding and prompt pool rows.
    pub d_inner: usize,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    /// Emit one-hot assignments (straight-through) instead of soft weights.
    pub hard: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            classes: 64,
            d_inner: 128,
            temperature: 1.0,
            hard: true,
        }
    }
}

/// A stable argsort and its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    /// `forward[j]` is the original index of the token placed at position `j`.
    pub forward: Vec<usize>,
    /// `inverse[forward[j]] == j`.
    pub inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        let v: Vec<usize> = (0..n).collect();
        Self {
            forward: v.clone(),
            inverse: v,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Reorders rows of `x` into sorted order.
    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.gather(&self.forward)
    }

    /// Puts sorted rows back into their original positions.
    pub fn restore<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.gather(&self.inverse)
    }
}

/// Stable argsort of class indices in `0..classes`.
pub fn sort_by_class(class_of: &[usize], classes: usize) -> Result<Permutation> {
    if let Some(&bad) = class_of.iter().find(|&&c| c >= classes) {
        return Err(Error::IndexOutOfRange {
            op: "sort-by-class",
            index: bad,
            extent: classes,
        });
    }
    let mut forward: Vec<usize> = (0..class_of.len()).collect();
    forward.sort_by_key(|&i| class_of[i]);
    let mut inverse = vec![0; forward.len()];
    for (j, &i) in forward.iter().enumerate() {
        inverse[i] = j;
    }
    Ok(Permutation { forward, inverse })
}

/// Standard Gumbel noise `−ln(−ln u)` with `u` in the open unit interval.
pub fn gumbel_noise(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    Tensor::from_fn(shape.to_vec(), |_| -(-rng.open01().ln()).ln())
}

/// `softmax((logits + g) / temperature)` over the last axis. With `rng`
/// absent no noise is added. In hard mode the forward value is the one-hot
/// of the row argmax and the gradient flows through the soft weights.
pub fn gumbel_softmax<'t>(
    logits: Var<'t>,
    temperature: f64,
    hard: bool,
    rng: Option<&mut SeededRng>,
) -> Result<Var<'t>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = logits.shape();
    let axis = shape
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::shape("gumbel-softmax", "scalar logits"))?;
    let noisy = match rng {
        Some(rng) => logits.add(logits.tape().constant(gumbel_noise(&shape, rng)?)?)?,
        None => logits,
    };
    let soft = noisy.scale(1.0 / temperature)?.softmax(axis)?;
    if hard {
        soft.straight_through_one_hot()
    } else {
        Ok(soft)
    }
}

/// `C + w·P`: per-token additive offset from the routing-weighted prototypes.
pub fn semantic_modulate_c<'t>(
    c: Var<'t>,
    weights: Var<'t>,
    prototypes: Var<'t>,
) -> Result<Var<'t>> {
    let (cs, ws, ps) = (c.shape(), weights.shape(), prototypes.shape());
    if cs.len() != 2
        || ws.len() != 2
        || ps.len() != 2
        || ws[0] != cs[0]
        || ws[1] != ps[0]
        || ps[1] != cs[1]
    {
        return Err(Error::shape(
            "semantic-modulate-c",
            format!("c {cs:?}, weights {ws:?}, prototypes {ps:?}"),
        ));
    }
    c.add(weights.matmul(prototypes)?)
}

/// Learned parts of the router: semantic query MLP, routing head, prompt
/// pool `W_E` and the prompt projection into the scan's state width.
#[derive(Clone, Debug)]
pub struct SemanticRouter {
    pub config: RouterConfig,
    pub token_dim: usize,
    pub prompt_dim: usize,
    pub query: Mlp,
    pub logits: Linear,
    pub pool: ParamId,
    pub prompt: Linear,
}

/// Result of routing one token sequence (in original token order).
#[derive(Clone, Debug)]
pub struct Routing<'t> {
    /// `[L, K]` routing weights (one-hot in hard mode).
    pub weights: Var<'t>,
    pub classes: Vec<usize>,
    pub permutation: Permutation,
    /// `[L, prompt_dim]` per-token prompts.
    pub prompts: Var<'t>,
}

/// Tokens and prompts in sorted order plus the permutation to undo it.
#[derive(Clone, Debug)]
pub struct Reordered<'t> {
    pub tokens: Var<'t>,
    pub prompts: Var<'t>,
    pub routing: Routing<'t>,
}

impl SemanticRouter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        token_dim: usize,
        prompt_dim: usize,
        config: RouterConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if config.classes < 1 || config.d_inner < 1 {
            return Err(Error::Config(format!(
                "router needs K ≥ 1 and d_inner ≥ 1, got K={} d_inner={}",
                config.classes, config.d_inner
            )));
        }
        let d = config.d_inner;
        let query = Mlp::new(
            store,
            &format!("{name}.query"),
            (token_dim, d, d),
            Init::DEFAULT,
            rng,
        )?;
        let logits = Linear::new(
            store,
            &format!("{name}.logits"),
            d,
            config.classes,
            Init::DEFAULT,
            true,
            rng,
        )?;
        let pool = store.add(
            format!("{name}.pool"),
            Init::Uniform { gain: 1.0 }.tensor(&[config.classes, d], 1, rng)?,
        )?;
        let prompt = Linear::new(
            store,
            &format!("{name}.prompt"),
            d,
            prompt_dim,
            Init::Uniform { gain: 0.1 },
            false,
            rng,
        )?;
        Ok(Self {
            config,
            token_dim,
            prompt_dim,
            query,
            logits,
            pool,
            prompt,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.query.params();
        v.extend(self.logits.params());
        v.push(self.pool);
        v.extend(self.prompt.params());
        v
    }

    /// Token-wise semantic embeddings `[L, d_inner]`.
    pub fn semantic_query<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: Var<'t>,
    ) -> Result<Var<'t>> {
        self.query.forward(tape, store, tokens)
    }

    /// `[K, prompt_dim]`: every pool row mapped through the prompt projection.
    pub fn prototypes<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        self.prompt
            .forward(tape, store, tape.param(store, self.pool)?)
    }

    /// Per-token prompts from routing weights: `(w·W_E)` then the prompt map.
    pub fn prompt_lookup<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        weights: Var<'t>,
    ) -> Result<Var<'t>> {
        let mixed = weights.matmul(tape.param(store, self.pool)?)?;
        self.prompt.forward(tape, store, mixed)
    }

    /// Assigns classes to `tokens` (`[L, token_dim]`) and builds prompts.
    /// `rng = None` disables the Gumbel noise.
    pub fn route<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: Var<'t>,
        rng: Option<&mut SeededRng>,
    ) -> Result<Routing<'t>> {
        let e = self.semantic_query(tape, store, tokens)?;
        let logits = self.logits.forward(tape, store, e)?;
        let weights = gumbel_softmax(logits, self.config.temperature, self.config.hard, rng)?;
        let k = self.config.classes;
        let classes: Vec<usize> = weights.value().data().chunks_exact(k).map(argmax).collect();
        let permutation = sort_by_class(&classes, k)?;
        let prompts = self.prompt_lookup(tape, store, weights)?;
        Ok(Routing {
            weights,
            classes,
            permutation,
            prompts,
        })
    }

    /// Routes, then reorders tokens and prompts by class.
    pub fn route_and_reorder<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: Var<'t>,
        rng: Option<&mut SeededRng>,
    ) -> Result<Reordered<'t>> {
        let routing = self.route(tape, store, tokens, rng)?;
        Ok(Reordered {
            tokens: routing.permutation.apply(tokens)?,
            prompts: routing.permutation.apply(routing.prompts)?,
            routing,
        })
    }
}

/// Plain-text sidecar: one `token<TAB>view<TAB>class` line per token, where
/// tokens are laid out view after view.
pub fn class_dump(classes: &[usize], tokens_per_view: usize) -> Result<String> {
    if tokens_per_view == 0 || !classes.len().is_multiple_of(tokens_per_view) {
        return Err(Error::invalid(format!(
            "{} tokens do not split into views of {tokens_per_view}",
            classes.len()
        )));
    }
    let mut out = String::from("# token\tview\tclass\n");
    for (i, c) in classes.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{}\t{c}", i / tokens_per_view);
    }
    Ok(out)
}
