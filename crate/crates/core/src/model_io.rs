//! Versioned binary serialization of fitted models and policies.
//!
//! Two artifact kinds share one container format: a policy artifact carries
//! everything needed to act (kernel, anchors, step size, weight matrix), and
//! a model artifact carries the sufficient statistics of a fit so training
//! can resume without recollecting data. Layout: magic `OWM1`, format
//! version, an artifact tag, then little-endian fields.

use std::path::Path;

use nalgebra::DMatrix;

use crate::env::{State, Transition, TransitionDataset};
use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelFamily, StateActionKernel};
use crate::worldmodel::{softmax, TabularWorldModel, WorldModel};

const MAGIC: &[u8; 4] = b"OWM1";
const VERSION: u32 = 1;

const TAG_POLICY: u8 = 0;
const TAG_DENSE_MODEL: u8 = 1;
const TAG_TABULAR_MODEL: u8 = 2;

/// Self-contained softmax policy: acts without the originating model.
#[derive(Debug, Clone)]
pub struct PolicyArtifact {
    pub env_id: String,
    pub kernel: StateActionKernel,
    pub eta: f64,
    pub anchors: Vec<(State, usize)>,
    pub c: DMatrix<f64>,
}

impl PolicyArtifact {
    /// Action distribution at a state.
    pub fn probs(&self, x: &State) -> Result<Vec<f64>> {
        let a = self.kernel.action_count;
        let mut logits = vec![0.0; a];
        for (i, (xi, _)) in self.anchors.iter().enumerate() {
            let w = self.kernel.base.eval(x, xi)?;
            if w != 0.0 {
                for (col, l) in logits.iter_mut().enumerate() {
                    *l += w * self.c[(i, col)];
                }
            }
        }
        for l in logits.iter_mut() {
            *l *= self.eta;
        }
        Ok(softmax(&logits))
    }
}

/// Sufficient statistics of a fitted world model.
#[derive(Debug, Clone)]
pub enum ModelArtifact {
    Dense {
        env_id: String,
        kernel: StateActionKernel,
        lambda: f64,
        reward_shift: f64,
        anchors: Vec<(State, usize)>,
        evolved: Vec<State>,
        raw_rewards: Vec<f64>,
    },
    Tabular {
        env_id: String,
        n_states: usize,
        n_actions: usize,
        lambda: f64,
        reward_shift: f64,
        slots: Vec<(usize, usize)>,
        counts: Vec<f64>,
        mean_shifted_reward: Vec<f64>,
        next_hist: Vec<Vec<(usize, f64)>>,
        total_n: usize,
    },
}

impl ModelArtifact {
    pub fn tabular(env_id: &str, model: &TabularWorldModel) -> Self {
        let (n_states, n_actions) = model.dims();
        ModelArtifact::Tabular {
            env_id: env_id.to_string(),
            n_states,
            n_actions,
            lambda: crate::worldmodel::QModel::lambda(model),
            reward_shift: crate::worldmodel::QModel::reward_shift(model),
            slots: model.slots().to_vec(),
            counts: model.counts().to_vec(),
            mean_shifted_reward: model.mean_shifted_rewards().to_vec(),
            next_hist: model.next_histograms().to_vec(),
            total_n: model.total_samples(),
        }
    }

    pub fn dense(env_id: &str, model: &WorldModel) -> Self {
        ModelArtifact::Dense {
            env_id: env_id.to_string(),
            kernel: model.kernel().clone(),
            lambda: crate::worldmodel::QModel::lambda(model),
            reward_shift: crate::worldmodel::QModel::reward_shift(model),
            anchors: model.anchors().to_vec(),
            evolved: model.evolved().to_vec(),
            raw_rewards: model
                .shifted_rewards()
                .iter()
                .map(|y| y - crate::worldmodel::QModel::reward_shift(model))
                .collect(),
        }
    }

    /// Reconstructs the fitted model; dense fits are re-solved from the
    /// stored transitions, which is deterministic.
    pub fn into_dense(self) -> Result<WorldModel> {
        match self {
            ModelArtifact::Dense {
                env_id,
                kernel,
                lambda,
                reward_shift,
                anchors,
                evolved,
                raw_rewards,
            } => {
                let mut ds = TransitionDataset::new(env_id, 0, "restored");
                for (((x, a), xp), r) in anchors.into_iter().zip(evolved).zip(raw_rewards) {
                    ds.push(Transition {
                        state: x,
                        action: a,
                        next: xp,
                        reward: r,
                        done: false,
                        truncated: false,
                    });
                }
                WorldModel::fit(&ds, kernel, lambda, reward_shift)
            }
            ModelArtifact::Tabular { .. } => {
                Err(Error::InvalidArgument("artifact holds a tabular model".into()))
            }
        }
    }

    pub fn into_tabular(self) -> Result<TabularWorldModel> {
        match self {
            ModelArtifact::Tabular {
                n_states,
                n_actions,
                lambda,
                reward_shift,
                slots,
                counts,
                mean_shifted_reward,
                next_hist,
                total_n,
                ..
            } => TabularWorldModel::from_stats(
                n_states,
                n_actions,
                slots,
                counts,
                mean_shifted_reward,
                next_hist,
                total_n,
                lambda,
                reward_shift,
            ),
            ModelArtifact::Dense { .. } => {
                Err(Error::InvalidArgument("artifact holds a dense model".into()))
            }
        }
    }
}

// --- encoding ---------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(tag: u8) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(tag);
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn state(&mut self, s: &State) {
        match s {
            State::Index(i) => {
                self.u8(0);
                self.u64(*i as u64);
            }
            State::Point2(a, b) => {
                self.u8(1);
                self.f64(*a);
                self.f64(*b);
            }
        }
    }

    fn kernel(&mut self, k: &StateActionKernel) {
        let family = match k.base.family {
            KernelFamily::Laplacian => 0u8,
            KernelFamily::Gaussian => 1,
            KernelFamily::OneHotTabular => 2,
        };
        self.u8(family);
        self.f64(k.base.sigma);
        match &k.base.scales {
            None => self.u8(0),
            Some(s) => {
                self.u8(1);
                self.u64(s.len() as u64);
                for v in s {
                    self.f64(*v);
                }
            }
        }
        self.u64(k.action_count as u64);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt<T>(&self, what: &str) -> Result<T> {
        Err(Error::InvalidArgument(format!("corrupt artifact: {what} at byte {}", self.pos)))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return self.corrupt("unexpected end");
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).or_else(|_| self.corrupt("bad utf8"))
    }

    fn state(&mut self) -> Result<State> {
        match self.u8()? {
            0 => Ok(State::Index(self.u64()? as usize)),
            1 => Ok(State::Point2(self.f64()?, self.f64()?)),
            _ => self.corrupt("bad state tag"),
        }
    }

    fn kernel(&mut self) -> Result<StateActionKernel> {
        let family = match self.u8()? {
            0 => KernelFamily::Laplacian,
            1 => KernelFamily::Gaussian,
            2 => KernelFamily::OneHotTabular,
            _ => return self.corrupt("bad kernel family"),
        };
        let sigma = self.f64()?;
        let base = match family {
            KernelFamily::OneHotTabular => Kernel::one_hot(),
            _ => Kernel::new(family, sigma)?,
        };
        let base = match self.u8()? {
            0 => base,
            1 => {
                let len = self.u64()? as usize;
                let mut scales = Vec::with_capacity(len);
                for _ in 0..len {
                    scales.push(self.f64()?);
                }
                base.with_scales(scales)?
            }
            _ => return self.corrupt("bad scales tag"),
        };
        let actions = self.u64()? as usize;
        StateActionKernel::new(base, actions)
    }
}

fn open(buf: &[u8]) -> Result<(u8, Reader<'_>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::InvalidArgument("not a model artifact (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::InvalidArgument(format!("unsupported artifact version {version}")));
    }
    let tag = r.u8()?;
    Ok((tag, r))
}

pub fn save_policy(path: &Path, artifact: &PolicyArtifact) -> Result<()> {
    let mut w = Writer::new(TAG_POLICY);
    w.string(&artifact.env_id);
    w.kernel(&artifact.kernel);
    w.f64(artifact.eta);
    w.u64(artifact.anchors.len() as u64);
    for (x, a) in &artifact.anchors {
        w.state(x);
        w.u64(*a as u64);
    }
    w.u64(artifact.c.nrows() as u64);
    w.u64(artifact.c.ncols() as u64);
    for v in artifact.c.iter() {
        w.f64(*v);
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyArtifact> {
    let buf = std::fs::read(path)?;
    let (tag, mut r) = open(&buf)?;
    if tag != TAG_POLICY {
        return Err(Error::InvalidArgument("artifact is not a policy".into()));
    }
    let env_id = r.string()?;
    let kernel = r.kernel()?;
    let eta = r.f64()?;
    let n = r.u64()? as usize;
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.state()?;
        let a = r.u64()? as usize;
        anchors.push((x, a));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let mut c = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            c[(i, j)] = r.f64()?;
        }
    }
    if rows != anchors.len() || cols != kernel.action_count {
        return Err(Error::InvalidArgument("artifact weight shape mismatch".into()));
    }
    Ok(PolicyArtifact { env_id, kernel, eta, anchors, c })
}

pub fn save_model(path: &Path, artifact: &ModelArtifact) -> Result<()> {
    match artifact {
        ModelArtifact::Dense {
            env_id,
            kernel,
            lambda,
            reward_shift,
            anchors,
            evolved,
            raw_rewards,
        } => {
            let mut w = Writer::new(TAG_DENSE_MODEL);
            w.string(env_id);
            w.kernel(kernel);
            w.f64(*lambda);
            w.f64(*reward_shift);
            w.u64(anchors.len() as u64);
            for (((x, a), xp), r) in anchors.iter().zip(evolved).zip(raw_rewards) {
                w.state(x);
                w.u64(*a as u64);
                w.state(xp);
                w.f64(*r);
            }
            std::fs::write(path, w.buf)?;
        }
        ModelArtifact::Tabular {
            env_id,
            n_states,
            n_actions,
            lambda,
            reward_shift,
            slots,
            counts,
            mean_shifted_reward,
            next_hist,
            total_n,
        } => {
            let mut w = Writer::new(TAG_TABULAR_MODEL);
            w.string(env_id);
            w.u64(*n_states as u64);
            w.u64(*n_actions as u64);
            w.f64(*lambda);
            w.f64(*reward_shift);
            w.u64(*total_n as u64);
            w.u64(slots.len() as u64);
            for (u, (x, a)) in slots.iter().enumerate() {
                w.u64(*x as u64);
                w.u64(*a as u64);
                w.f64(counts[u]);
                w.f64(mean_shifted_reward[u]);
                w.u64(next_hist[u].len() as u64);
                for (xp, p) in &next_hist[u] {
                    w.u64(*xp as u64);
                    w.f64(*p);
                }
            }
            std::fs::write(path, w.buf)?;
        }
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    let buf = std::fs::read(path)?;
    let (tag, mut r) = open(&buf)?;
    match tag {
        TAG_DENSE_MODEL => {
            let env_id = r.string()?;
            let kernel = r.kernel()?;
            let lambda = r.f64()?;
            let reward_shift = r.f64()?;
            let n = r.u64()? as usize;
            let mut anchors = Vec::with_capacity(n);
            let mut evolved = Vec::with_capacity(n);
            let mut raw_rewards = Vec::with_capacity(n);
            for _ in 0..n {
                let x = r.state()?;
                let a = r.u64()? as usize;
                anchors.push((x, a));
                evolved.push(r.state()?);
                raw_rewards.push(r.f64()?);
            }
            Ok(ModelArtifact::Dense {
                env_id,
                kernel,
                lambda,
                reward_shift,
                anchors,
                evolved,
                raw_rewards,
            })
        }
        TAG_TABULAR_MODEL => {
            let env_id = r.string()?;
            let n_states = r.u64()? as usize;
            let n_actions = r.u64()? as usize;
            let lambda = r.f64()?;
            let reward_shift = r.f64()?;
            let total_n = r.u64()? as usize;
            let u = r.u64()? as usize;
            let mut slots = Vec::with_capacity(u);
            let mut counts = Vec::with_capacity(u);
            let mut mean_shifted_reward = Vec::with_capacity(u);
            let mut next_hist = Vec::with_capacity(u);
            for _ in 0..u {
                let x = r.u64()? as usize;
                let a = r.u64()? as usize;
                slots.push((x, a));
                counts.push(r.f64()?);
                mean_shifted_reward.push(r.f64()?);
                let k = r.u64()? as usize;
                let mut hist = Vec::with_capacity(k);
                for _ in 0..k {
                    let xp = r.u64()? as usize;
                    hist.push((xp, r.f64()?));
                }
                next_hist.push(hist);
            }
            Ok(ModelArtifact::Tabular {
                env_id,
                n_states,
                n_actions,
                lambda,
                reward_shift,
                slots,
                counts,
                mean_shifted_reward,
                next_hist,
                total_n,
            })
        }
        _ => Err(Error::InvalidArgument("artifact is not a model".into())),
    }
}
