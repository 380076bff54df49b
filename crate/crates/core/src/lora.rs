//! Low-rank adaptation of frozen projections.
//!
//! An adapter attached to a projection `W₀ (d_out × d_in)` contributes
//! `(α/r)·B·A` with `A: r × d_in` and `B: d_out × r`. `B` starts at zero, so a
//! freshly injected adapter leaves the model output unchanged; `A` is drawn
//! from a zero-mean uniform distribution with bound `1/√d_in`.
//!
//! Adapter tensors live in the model's [`ParamStore`] under
//! `<target>.lora.A` / `<target>.lora.B`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    #[inline]
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn numel(&self) -> usize {
        adapter_param_count(self.d_in, self.d_out, self.rank)
    }

    pub fn factors(&self, store: &ParamStore) -> LoraFactors {
        LoraFactors { a: store.get(self.a).clone(), b: store.get(self.b).clone(), rank: self.rank, alpha: self.alpha }
    }

    pub fn header(&self) -> AdapterHeader {
        AdapterHeader { target: self.target.clone(), rank: self.rank, alpha: self.alpha }
    }
}

/// Checkpoint header entry for one adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterHeader {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

/// `r · (d_in + d_out)`.
pub fn adapter_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * (d_in + d_out)
}

/// The adapters attached to one model, keyed by target projection name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
    index: HashMap<String, usize>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.index.get(target).map(|&i| &self.adapters[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.iter()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::numel).sum()
    }

    fn push(&mut self, adapter: LoraAdapter) -> Result<()> {
        if self.index.contains_key(&adapter.target) {
            return Err(Error::Config(format!("projection {} already carries an adapter", adapter.target)));
        }
        self.index.insert(adapter.target.clone(), self.adapters.len());
        self.adapters.push(adapter);
        Ok(())
    }

    /// Attaches one adapter to every projection whose name matches any of
    /// `patterns`. Returns the adapted projection names in model order.
    pub fn inject(
        &mut self,
        store: &mut ParamStore,
        projections: &[&Linear],
        patterns: &[String],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Vec<String>> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        let matched: Vec<&Linear> =
            projections.iter().copied().filter(|p| patterns.iter().any(|pat| glob_match(pat, &p.name))).collect();
        if matched.is_empty() {
            return Err(Error::Config(format!("no projection matches LoRA targets {patterns:?}")));
        }
        if let Some(dup) = matched.iter().find(|p| self.index.contains_key(&p.name)) {
            return Err(Error::Config(format!("projection {} already carries an adapter", dup.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(matched.len());
        for proj in matched {
            if rank >= proj.d_in.min(proj.d_out) {
                log::warn!("LoRA rank {rank} on {} ({}x{}) is not low-rank", proj.name, proj.d_out, proj.d_in);
            }
            let bound = 1.0 / (proj.d_in as f64).sqrt();
            let a = store.add(format!("{}.lora.A", proj.name), uniform(&mut rng, rank, proj.d_in, bound), true)?;
            let b = store.add(format!("{}.lora.B", proj.name), Tensor::zeros(proj.d_out, rank), true)?;
            self.push(LoraAdapter {
                target: proj.name.clone(),
                a,
                b,
                rank,
                alpha,
                d_in: proj.d_in,
                d_out: proj.d_out,
            })?;
            names.push(proj.name.clone());
        }
        Ok(names)
    }

    /// Rebinds adapters described by checkpoint headers to `store`.
    pub fn bind(store: &ParamStore, headers: &[AdapterHeader]) -> Result<Self> {
        let mut set = AdapterSet::new();
        for h in headers {
            let a = store.require(&format!("{}.lora.A", h.target))?;
            let b = store.require(&format!("{}.lora.B", h.target))?;
            let (rank, d_in) = store.get(a).shape();
            let (d_out, rank_b) = store.get(b).shape();
            if rank != h.rank || rank_b != h.rank {
                return Err(Error::Checkpoint(format!(
                    "adapter {} has rank {rank}/{rank_b}, header says {}",
                    h.target, h.rank
                )));
            }
            set.push(LoraAdapter { target: h.target.clone(), a, b, rank, alpha: h.alpha, d_in, d_out })?;
        }
        Ok(set)
    }

    pub fn headers(&self) -> Vec<AdapterHeader> {
        self.adapters.iter().map(LoraAdapter::header).collect()
    }
}

/// Owned adapter factors for the standalone forward / merge operations.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraFactors {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn check(&self, w0: &Tensor) -> Result<()> {
        let (d_out, d_in) = w0.shape();
        self.a.expect_shape((self.rank, d_in), "LoRA A")?;
        self.b.expect_shape((d_out, self.rank), "LoRA B")?;
        Ok(())
    }

    /// `(α/r)·B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scale()))
    }
}

/// `x·W₀ᵀ + (α/r)·(x·Aᵀ)·Bᵀ` for row-vector inputs `x (n × d_in)`.
pub fn adapted_forward(x: &Tensor, w0: &Tensor, adapter: &LoraFactors) -> Result<Tensor> {
    adapter.check(w0)?;
    let base = x.matmul_t(w0)?;
    let delta = x.matmul_t(&adapter.a)?.matmul_t(&adapter.b)?.scale(adapter.scale());
    base.add(&delta)
}

/// `W₀ + (α/r)·B·A`.
pub fn merge(w0: &Tensor, adapter: &LoraFactors) -> Result<Tensor> {
    adapter.check(w0)?;
    w0.add(&adapter.delta()?)
}

/// `*` matches any (possibly empty) run of characters.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p = pattern.as_bytes();
    let n = name.as_bytes();
    let (mut pi, mut ni) = (0, 0);
    let (mut star, mut mark) = (None, 0);
    while ni < n.len() {
        if pi < p.len() && p[pi] != b'*' && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == b'*' {
            star = Some(pi);
            mark = ni;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ni = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == b'*' {
        pi += 1;
    }
    pi == p.len()
}

/// Expands target shorthands (`q`, `k`, `v`, `out`, `mlp`) to projection
/// name patterns. Anything else is taken as a literal pattern.
pub fn target_patterns(spec: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for t in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match t {
            "q" | "k" | "v" | "out" => out.push(format!("*.attn.{t}")),
            "mlp" => {
                out.push("*.mlp.fc1".to_string());
                out.push("*.mlp.fc2".to_string());
            }
            other => out.push(other.to_string()),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty LoRA target list".into()));
    }
    Ok(out)
}

/// Which parameters train. Every parameter must match exactly one side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

impl Default for FreezePolicy {
    /// Frozen image encoder and prompt encoder; trainable adapters and mask decoder.
    fn default() -> Self {
        FreezePolicy {
            frozen: vec!["encoder.*.weight".into(), "encoder.*.bias".into(), "prompt.*".into()],
            trainable: vec!["*.lora.A".into(), "*.lora.B".into(), "decoder.*".into()],
        }
    }
}

impl FreezePolicy {
    pub fn all_frozen() -> Self {
        FreezePolicy { frozen: vec!["*".into()], trainable: vec![] }
    }

    pub fn all_trainable() -> Self {
        FreezePolicy { frozen: vec![], trainable: vec!["*".into()] }
    }

    /// `Ok(true)` when `name` trains.
    pub fn classify(&self, name: &str) -> Result<bool> {
        let f = self.frozen.iter().any(|p| glob_match(p, name));
        let t = self.trainable.iter().any(|p| glob_match(p, name));
        match (f, t) {
            (true, false) => Ok(false),
            (false, true) => Ok(true),
            (true, true) => Err(Error::Config(format!("{name} is both frozen and trainable"))),
            (false, false) => Err(Error::Config(format!("{name} matches no freeze policy pattern"))),
        }
    }

    /// Sets every parameter's trainable flag.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let flags = store.iter().map(|(id, p)| self.classify(&p.name).map(|t| (id, t))).collect::<Result<Vec<_>>>()?;
        for (id, t) in flags {
            store.set_trainable(id, t);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
    /// Trainable entries that belong to LoRA adapters.
    pub adapter: usize,
    pub fraction: f64,
}

impl ParamCount {
    /// Trainable entries outside the adapters (mask decoder and the like).
    pub fn other_trainable(&self) -> usize {
        self.trainable - self.adapter
    }
}

fn is_adapter_param(name: &str) -> bool {
    name.ends_with(".lora.A") || name.ends_with(".lora.B")
}

/// Counts parameters by category from `(name, entry count)` pairs, so
/// configurations too large to allocate can still be accounted.
pub fn count_params<'a>(
    entries: impl IntoIterator<Item = (&'a str, usize)>,
    policy: &FreezePolicy,
) -> Result<ParamCount> {
    let (mut trainable, mut frozen, mut adapter) = (0, 0, 0);
    for (name, n) in entries {
        if policy.classify(name)? {
            trainable += n;
            if is_adapter_param(name) {
                adapter += n;
            }
        } else {
            frozen += n;
        }
    }
    let total = trainable + frozen;
    Ok(ParamCount {
        trainable,
        frozen,
        adapter,
        fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    })
}

pub fn trainable_count(store: &ParamStore, policy: &FreezePolicy) -> Result<ParamCount> {
    count_params(store.iter().map(|(_, p)| (p.name.as_str(), p.value.len())), policy)
}
