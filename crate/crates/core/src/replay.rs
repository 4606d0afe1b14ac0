//! Replay buffer, minibatches and bootstrap token groups.

use rand::Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub s: Vec<T>,
    pub a: Vec<T>,
    pub r: T,
    pub s_next: Vec<T>,
    /// True termination. Time-limit truncation is stored as `false`.
    pub done: bool,
}

/// Ring buffer `D` that overwrites its oldest entry once full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    items: Vec<Transition<T>>,
    /// Slot the next push writes to once the buffer is full.
    head: usize,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            items: Vec::new(),
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition<T>) -> Result<()> {
        if t.s.len() != self.state_dim || t.s_next.len() != self.state_dim || t.a.len() != self.action_dim {
            return Err(Error::contract(format!(
                "transition dims (s {}, a {}, s' {}) do not match buffer (s {}, a {})",
                t.s.len(),
                t.a.len(),
                t.s_next.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        if !t.r.is_finite() {
            return Err(Error::contract("non-finite reward"));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// The `i`-th live transition, oldest first.
    pub fn get(&self, i: usize) -> Option<&Transition<T>> {
        if i >= self.items.len() {
            return None;
        }
        self.items.get((self.head + i) % self.items.len())
    }

    /// `batch_size` transitions drawn uniformly with replacement.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Minibatch<T>> {
        if self.items.is_empty() {
            return Err(Error::state("sampling from an empty replay buffer"));
        }
        if batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        let picks: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..self.items.len())).collect();
        Ok(Minibatch {
            transitions: picks.iter().map(|&i| self.items[i].clone()).collect(),
            slots: picks,
        })
    }

    /// Stores the live transitions, oldest first.
    pub fn snapshot(&self) -> Archive {
        let mut a = Archive::new();
        a.set_meta("kind", "replay");
        a.set_meta("capacity", self.capacity);
        let n = self.len();
        let (sd, ad) = (self.state_dim, self.action_dim);
        let live: Vec<&Transition<T>> = (0..n).filter_map(|i| self.get(i)).collect();
        let flat = |f: &dyn Fn(&Transition<T>) -> &[T]| live.iter().flat_map(|t| f(t).to_vec()).collect::<Vec<T>>();
        a.put_real("s", &[n, sd], &flat(&|t| &t.s));
        a.put_real("a", &[n, ad], &flat(&|t| &t.a));
        a.put_real("s_next", &[n, sd], &flat(&|t| &t.s_next));
        a.put_real("r", &[n], &live.iter().map(|t| t.r).collect::<Vec<_>>());
        a.put_bytes("done", &live.iter().map(|t| t.done as u8).collect::<Vec<_>>());
        a
    }

    pub fn restore(archive: &Archive) -> Result<Self> {
        if archive.meta("kind")? != "replay" {
            return Err(Error::Format("archive is not a replay snapshot".into()));
        }
        let capacity: usize = archive
            .meta("capacity")?
            .parse()
            .map_err(|_| Error::Format("bad capacity".into()))?;
        let (s_shape, s) = archive.get_real::<T>("s")?;
        let (a_shape, a) = archive.get_real::<T>("a")?;
        let (_, s_next) = archive.get_real::<T>("s_next")?;
        let (_, r) = archive.get_real::<T>("r")?;
        let done = archive.get_bytes("done")?;
        let (n, sd, ad) = (s_shape[0], s_shape[1], a_shape[1]);
        if a.len() != n * ad || s_next.len() != n * sd || r.len() != n || done.len() != n {
            return Err(Error::Format("inconsistent replay snapshot".into()));
        }
        let mut buf = ReplayBuffer::new(capacity, sd, ad)?;
        for i in 0..n {
            buf.push(Transition {
                s: s[i * sd..(i + 1) * sd].to_vec(),
                a: a[i * ad..(i + 1) * ad].to_vec(),
                r: r[i],
                s_next: s_next[i * sd..(i + 1) * sd].to_vec(),
                done: done[i] != 0,
            })?;
        }
        Ok(buf)
    }
}

/// Minibatch `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch<T> {
    pub transitions: Vec<Transition<T>>,
    /// Storage slots the transitions were read from.
    pub slots: Vec<usize>,
}

impl<T: Real> Minibatch<T> {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Stacks the tokens of `groups` in order.
    pub fn gather(&self, groups: &[BootstrapGroup]) -> Result<Tokens<T>> {
        let first = self
            .transitions
            .first()
            .ok_or_else(|| Error::param("empty minibatch"))?;
        let group_len = groups.first().map_or(0, |g| g.indices.len());
        if group_len == 0 || groups.iter().any(|g| g.indices.len() != group_len) {
            return Err(Error::param("groups must be non-empty and of equal length"));
        }
        let (sd, ad) = (first.s.len(), first.a.len());
        let rows = groups.len() * group_len;
        let mut pairs = Vec::with_capacity(rows * (sd + ad));
        let mut next_states = Vec::with_capacity(rows * sd);
        let mut rewards = Vec::with_capacity(rows);
        let mut dones = Vec::with_capacity(rows);
        for &i in groups.iter().flat_map(|g| &g.indices) {
            let t = self
                .transitions
                .get(i)
                .ok_or_else(|| Error::param(format!("group index {i} outside minibatch of {}", self.len())))?;
            pairs.extend_from_slice(&t.s);
            pairs.extend_from_slice(&t.a);
            next_states.extend_from_slice(&t.s_next);
            rewards.push(t.r);
            dones.push(t.done);
        }
        Ok(Tokens {
            group_len,
            pairs: Tensor::new(&[rows, sd + ad], pairs)?,
            next_states: Tensor::new(&[rows, sd], next_states)?,
            rewards,
            dones,
        })
    }

    /// `[B × state_dim]`
    pub fn states(&self) -> Result<Tensor<T>> {
        let sd = self.transitions.first().map_or(0, |t| t.s.len());
        let data = self.transitions.iter().flat_map(|t| t.s.iter().copied()).collect();
        Tensor::new(&[self.len(), sd], data)
    }
}

/// Tokens of stacked bootstrap groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens<T: Real> {
    pub group_len: usize,
    /// `[R × (state_dim + action_dim)]`
    pub pairs: Tensor<T>,
    /// `[R × state_dim]`
    pub next_states: Tensor<T>,
    pub rewards: Vec<T>,
    pub dones: Vec<bool>,
}

/// Sub-sample `b*`: indices into a minibatch, drawn with replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapGroup {
    pub indices: Vec<usize>,
}

/// How many groups each member processes per update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupsPerUpdate {
    /// `⌈|B| / |b*|⌉` groups, about `|B|` tokens.
    #[default]
    Cover,
    /// `|B|` groups, one per minibatch element.
    PerElement,
}

impl GroupsPerUpdate {
    pub fn name(self) -> &'static str {
        match self {
            GroupsPerUpdate::Cover => "cover",
            GroupsPerUpdate::PerElement => "per_element",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "cover" => Some(GroupsPerUpdate::Cover),
            "per_element" => Some(GroupsPerUpdate::PerElement),
            _ => None,
        }
    }

    pub fn count(self, batch_len: usize, group_size: usize) -> usize {
        match self {
            GroupsPerUpdate::Cover => batch_len.div_ceil(group_size.max(1)),
            GroupsPerUpdate::PerElement => batch_len,
        }
    }
}

/// `count` groups of `group_size` indices into a minibatch of `batch_len`,
/// each drawn uniformly with replacement.
pub fn bootstrap_groups<R: Rng + ?Sized>(
    batch_len: usize,
    group_size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<BootstrapGroup>> {
    if group_size == 0 {
        return Err(Error::param("group size must be positive"));
    }
    if batch_len == 0 {
        return Err(Error::param("empty minibatch"));
    }
    Ok((0..count)
        .map(|_| BootstrapGroup {
            indices: (0..group_size).map(|_| rng.gen_range(0..batch_len)).collect(),
        })
        .collect())
}
