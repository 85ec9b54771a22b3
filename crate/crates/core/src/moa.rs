//! Mixture of adapters gated by a speaker embedding.
//!
//! A site holds `N` bottleneck adapters and a gate mapping the utterance's
//! speaker embedding to one weight per adapter. The output is
//! `x + sum_i g_i(x_e) * adapter_i(x)`. In sparse routing only the `k`
//! largest softmax weights survive and are renormalized to sum to one;
//! pruned adapters are never evaluated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Builder, LayerNorm, Linear, WeightInit};
use crate::params::Session;
use crate::tensor::{Graph, Tensor, Var};

/// How gate weights are turned into adapter coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    Dense,
    Sparse { k: usize },
}

impl Routing {
    pub fn validate(self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Config("a mixture needs at least one adapter".into()));
        }
        if let Routing::Sparse { k } = self {
            if k == 0 || k > n {
                return Err(Error::Config(format!("top-k of {k} invalid for {n} adapters")));
            }
        }
        Ok(())
    }

    /// Number of adapters evaluated per utterance.
    pub fn active(self, n: usize) -> usize {
        match self {
            Routing::Dense => n,
            Routing::Sparse { k } => k,
        }
    }

    /// Survivor indices for softmax weights `probs`, ascending.
    ///
    /// Sparse routing keeps the `k` largest entries; ties go to the lower
    /// adapter index.
    pub fn survivors(self, probs: &[f64]) -> Vec<usize> {
        match self {
            Routing::Dense => (0..probs.len()).collect(),
            Routing::Sparse { k } => {
                let mut order: Vec<usize> = (0..probs.len()).collect();
                order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
                let mut keep = order[..k.min(probs.len())].to_vec();
                keep.sort_unstable();
                keep
            }
        }
    }
}

/// `up(relu(down(layer_norm(x))))`, no internal residual.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub norm: LayerNorm,
    pub down: Linear,
    pub up: Linear,
    pub dim: usize,
    pub bottleneck: usize,
}

impl Adapter {
    /// Down-projection is fan-in uniform; the up-projection starts at zero so
    /// a freshly inserted adapter contributes nothing.
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, bottleneck: usize) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::Config(format!(
                "adapter bottleneck {bottleneck} must be in 1..{dim}"
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
            down: Linear::new(b, &format!("{name}.down"), dim, bottleneck, WeightInit::FanIn)?,
            up: Linear::new(b, &format!("{name}.up"), bottleneck, dim, WeightInit::Zero)?,
            dim,
            bottleneck,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let d = s.graph.value(x).cols();
        if d != self.dim {
            return Err(Error::dim("adapter", s.graph.shape(x), &[self.dim]));
        }
        let h = self.norm.forward(s, x)?;
        let h = self.down.forward(s, h)?;
        let h = s.graph.relu(h);
        self.up.forward(s, h)
    }

    pub fn num_params(dim: usize, bottleneck: usize) -> usize {
        dim * bottleneck + bottleneck + bottleneck * dim + dim + 2 * dim
    }
}

/// Linear projection of the speaker embedding followed by softmax and routing.
#[derive(Clone, Debug)]
pub struct GatingNetwork {
    pub proj: Linear,
    pub routing: Routing,
    pub n: usize,
}

/// Weights actually applied at one site for one utterance.
#[derive(Clone, Debug)]
pub struct GateOutput {
    /// `[1, N]`, zeros at pruned slots.
    pub weights: Var,
    pub survivors: Vec<usize>,
}

impl GatingNetwork {
    pub fn new(b: &mut Builder<'_>, name: &str, d_emb: usize, n: usize, routing: Routing) -> Result<Self> {
        routing.validate(n)?;
        Ok(Self {
            proj: Linear::new(b, name, d_emb, n, WeightInit::FanIn)?,
            routing,
            n,
        })
    }

    /// `x_e` is a `[1, D_emb]` row.
    pub fn forward(&self, s: &mut Session<'_>, x_e: Var) -> Result<GateOutput> {
        if s.graph.value(x_e).numel() != self.proj.input {
            return Err(Error::dim("gate", s.graph.shape(x_e), &[self.proj.input]));
        }
        let logits = self.proj.forward(s, x_e)?;
        let probs = s.graph.softmax(logits);
        apply_routing(&mut s.graph, probs, self.routing)
    }
}

/// Routes softmax weights `probs` (`[1, N]`): dense passes them through,
/// sparse keeps the top `k` and renormalizes.
pub fn apply_routing(g: &mut Graph, probs: Var, routing: Routing) -> Result<GateOutput> {
    let n = g.value(probs).numel();
    routing.validate(n)?;
    let survivors = routing.survivors(g.value(probs).data());
    let weights = match routing {
        Routing::Sparse { k } if k < n => g.select_renorm(probs, &survivors)?,
        _ => probs,
    };
    Ok(GateOutput { weights, survivors })
}

#[derive(Clone, Debug)]
pub struct MoaModule {
    pub adapters: Vec<Adapter>,
    pub gate: GatingNetwork,
    pub site_id: String,
}

impl MoaModule {
    pub fn new(
        b: &mut Builder<'_>,
        site_id: &str,
        dim: usize,
        d_emb: usize,
        n: usize,
        bottleneck: usize,
        routing: Routing,
    ) -> Result<Self> {
        let gate = GatingNetwork::new(b, &format!("{site_id}.moa.gate"), d_emb, n, routing)?;
        let adapters = (0..n)
            .map(|i| Adapter::new(b, &format!("{site_id}.moa.adapter{i}"), dim, bottleneck))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adapters,
            gate,
            site_id: site_id.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.adapters[0].dim
    }

    /// Residual mixture `x + sum_i w_i * adapter_i(x)` over the survivors.
    pub fn forward_gated(&self, s: &mut Session<'_>, x: Var, gate: &GateOutput) -> Result<Var> {
        let mut acc = x;
        for &i in &gate.survivors {
            let a = self.adapters[i].forward(s, x)?;
            let weighted = s.graph.scale_by(a, gate.weights, i)?;
            acc = s.graph.add(acc, weighted)?;
        }
        Ok(acc)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, x_e: Var) -> Result<(Var, GateOutput)> {
        let gate = self.gate.forward(s, x_e)?;
        let y = self.forward_gated(s, x, &gate)?;
        Ok((y, gate))
    }

    pub fn shape(&self) -> MoaShape {
        MoaShape {
            dim: self.dim(),
            bottleneck: self.adapters[0].bottleneck,
            d_emb: self.gate.proj.input,
            n: self.gate.n,
        }
    }

    pub fn flops(&self, seq_len: usize) -> MoaFlops {
        moa_flops(self.shape(), self.gate.routing.active(self.gate.n), seq_len)
    }
}

/// Importance loss over a batch: squared coefficient of variation of the
/// per-adapter column sums of the applied gate weights. Each entry of
/// `rows` is one utterance's `[1, N]` weight row.
pub fn importance_loss(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Contract("importance loss needs at least one row".into()));
    }
    let stacked = if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(rows)?
    };
    let importance = g.sum_rows(stacked);
    g.cv_squared(importance)
}

/// Value-only importance loss for a matrix of gate rows.
pub fn importance_loss_value(rows: &[Vec<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = rows
        .iter()
        .map(|r| Ok(g.constant(Tensor::matrix(1, r.len(), r.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let loss = importance_loss(&mut g, &vars)?;
    g.value(loss).item()
}

/// Geometry of one mixture site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoaShape {
    pub dim: usize,
    pub bottleneck: usize,
    pub d_emb: usize,
    pub n: usize,
}

/// Analytic operation counts for one site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoaFlops {
    /// Multiply-accumulates in the down/up projections of evaluated adapters.
    pub adapter_macs: u64,
    /// Elementwise work of evaluated adapters (norm, bias, activation, mixing).
    pub adapter_elementwise: u64,
    /// Gate projection multiply-accumulates (once per utterance).
    pub gate_macs: u64,
    pub infer_flops: u64,
    pub train_flops: u64,
}

/// Counts for `active` evaluated adapters over `seq_len` frames.
///
/// Per frame and adapter: `2·D·B` projection MACs; elementwise work is
/// `5·D` for the layer norm (mean, variance, centre, scale, affine),
/// `2·B` for bias and ReLU in the bottleneck, `D` for the up bias and `2·D`
/// for the weighted accumulation. The gate costs `D_emb·N` MACs plus `3·N`
/// for softmax and routing. A FLOP is two per MAC plus one per elementwise
/// op; training counts forward plus a backward of twice the forward cost and
/// `2·N` bookkeeping for the importance sums.
pub fn moa_flops(shape: MoaShape, active: usize, seq_len: usize) -> MoaFlops {
    let (d, b, t, a) = (
        shape.dim as u64,
        shape.bottleneck as u64,
        seq_len as u64,
        active as u64,
    );
    let adapter_macs = a * t * 2 * d * b;
    let adapter_elementwise = a * t * (5 * d + 2 * b + d + 2 * d);
    let gate_macs = (shape.d_emb * shape.n) as u64;
    let gate_elementwise = 3 * shape.n as u64;
    let infer_flops = 2 * (adapter_macs + gate_macs) + adapter_elementwise + gate_elementwise;
    let train_flops = 3 * infer_flops + 2 * shape.n as u64;
    MoaFlops {
        adapter_macs,
        adapter_elementwise,
        gate_macs,
        infer_flops,
        train_flops,
    }
}
