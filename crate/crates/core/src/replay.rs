//! Keep-everything transition store.
//!
//! Transitions are held at `f32` precision, the same precision as the `ODPB`
//! file format, so a saved buffer reloads bit-identically and a run that
//! distills from disk sees exactly what an in-memory run saw.
//!
//! `source_id` records which schedule segment produced a transition. The core
//! MPO/CRR updates never read it; only sampling probes, reward scaling and the
//! diagnostics do.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::ByteReader;
use crate::env::{Action, Obs, ACT_DIM, OBS_DIM};
use crate::error::{OdpError, Result};

pub const BUFFER_MAGIC: &[u8; 4] = b"ODPB";
pub const BUFFER_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 8;
const RECORD_BYTES: usize = 4 * OBS_DIM + 4 * ACT_DIM + 4 + 1 + 4 * OBS_DIM + 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: [f32; OBS_DIM],
    pub action: [f32; ACT_DIM],
    pub reward: f32,
    pub next_obs: [f32; OBS_DIM],
    pub terminal: bool,
    pub source_id: u32,
}

impl Transition {
    pub fn new(
        obs: &Obs,
        action: &Action,
        reward: f64,
        next_obs: &Obs,
        terminal: bool,
        source_id: u32,
    ) -> Self {
        Transition {
            obs: obs.map(|x| x as f32),
            action: action.map(|x| x as f32),
            reward: reward as f32,
            next_obs: next_obs.map(|x| x as f32),
            terminal,
            source_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.obs.iter().all(|x| x.is_finite())
            && self.next_obs.iter().all(|x| x.is_finite())
            && self.action.iter().all(|x| x.is_finite())
            && self.reward.is_finite();
        if !finite {
            return Err(OdpError::invalid("transition has non-finite fields"));
        }
        if self.action.iter().any(|a| a.abs() > 1.0) {
            return Err(OdpError::invalid(format!(
                "transition action {:?} outside [-1, 1]^2",
                self.action
            )));
        }
        Ok(())
    }

    pub fn obs_f64(&self) -> Obs {
        self.obs.map(f64::from)
    }

    pub fn next_obs_f64(&self) -> Obs {
        self.next_obs.map(f64::from)
    }

    pub fn action_f64(&self) -> Action {
        self.action.map(f64::from)
    }
}

/// Tag of transitions whose stage of origin is unknown.
pub const UNTAGGED: u32 = u32::MAX;

/// How `sample_batch` chooses transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSpec {
    /// I.i.d. uniform over every stored transition.
    Uniform,
    /// Pick a source by weight, then uniform within it (with replacement).
    Ratio(Vec<(u32, f64)>),
}

impl MixSpec {
    pub fn ratio(weights: &[(u32, f64)]) -> Result<Self> {
        if weights.is_empty() {
            return Err(OdpError::config("mix.ratios", "must name at least one source"));
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if weights.iter().any(|(_, w)| !(*w > 0.0) || !w.is_finite()) {
            return Err(OdpError::config("mix.ratios", "weights must be finite and > 0"));
        }
        Ok(MixSpec::Ratio(
            weights.iter().map(|&(s, w)| (s, w / total)).collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub count: usize,
    pub mean_reward: f64,
    /// Total reward divided by the number of episode fragments in the source.
    pub mean_episode_return: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
    by_source: BTreeMap<u32, Vec<usize>>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_transitions(transitions: impl IntoIterator<Item = Transition>) -> Result<Self> {
        let mut buf = Self::new();
        for t in transitions {
            buf.append(t)?;
        }
        Ok(buf)
    }

    pub fn append(&mut self, transition: Transition) -> Result<()> {
        transition.validate()?;
        self.by_source
            .entry(transition.source_id)
            .or_default()
            .push(self.transitions.len());
        self.transitions.push(transition);
        Ok(())
    }

    pub fn extend_from(&mut self, other: &ReplayBuffer) -> Result<()> {
        for t in other.iter() {
            self.append(*t)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.transitions.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn sources(&self) -> Vec<u32> {
        self.by_source.keys().copied().collect()
    }

    pub fn source_counts(&self) -> BTreeMap<u32, usize> {
        self.by_source.iter().map(|(&s, v)| (s, v.len())).collect()
    }

    pub fn source_count(&self, source_id: u32) -> usize {
        self.by_source.get(&source_id).map_or(0, Vec::len)
    }

    /// Copy of the transitions carrying `source_id`, in original order.
    pub fn filter_source(&self, source_id: u32) -> ReplayBuffer {
        let mut out = ReplayBuffer::new();
        if let Some(idx) = self.by_source.get(&source_id) {
            for &i in idx {
                out.append(self.transitions[i]).expect("stored transitions are valid");
            }
        }
        out
    }

    /// Copy with every `source_id` passed through `f`.
    pub fn map_sources(&self, f: impl Fn(u32) -> u32) -> ReplayBuffer {
        let mut out = ReplayBuffer::new();
        for t in &self.transitions {
            out.append(Transition {
                source_id: f(t.source_id),
                ..*t
            })
            .expect("stored transitions are valid");
        }
        out
    }

    /// Copy with every source tag replaced by [`UNTAGGED`].
    pub fn strip_sources(&self) -> ReplayBuffer {
        self.map_sources(|_| UNTAGGED)
    }

    /// True when every transition carries a real stage tag.
    pub fn is_tagged(&self) -> bool {
        !self.by_source.contains_key(&UNTAGGED)
    }

    /// Sources ordered by the position of their first transition.
    pub fn sources_by_first_appearance(&self) -> Vec<u32> {
        let mut firsts: Vec<(usize, u32)> = self.by_source.iter().map(|(&s, idx)| (idx[0], s)).collect();
        firsts.sort_unstable();
        firsts.into_iter().map(|(_, s)| s).collect()
    }

    /// Buffer positions holding `source_id`, in insertion order.
    pub fn source_indices(&self, source_id: u32) -> &[usize] {
        self.by_source.get(&source_id).map_or(&[], |v| v.as_slice())
    }

    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        mix: &MixSpec,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(OdpError::invalid("cannot sample from an empty buffer"));
        }
        match mix {
            MixSpec::Uniform => Ok((0..batch_size)
                .map(|_| rng.random_range(0..self.transitions.len()))
                .collect()),
            MixSpec::Ratio(weights) => {
                let mut pools = Vec::with_capacity(weights.len());
                for (source, _) in weights {
                    match self.by_source.get(source) {
                        Some(p) if !p.is_empty() => pools.push(p),
                        _ => {
                            return Err(OdpError::config(
                                "mix.ratios",
                                format!("source {source} has no transitions"),
                            ))
                        }
                    }
                }
                let total: f64 = weights.iter().map(|(_, w)| w).sum();
                let mut out = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = weights.len() - 1;
                    for (k, (_, w)) in weights.iter().enumerate() {
                        if u < *w {
                            pick = k;
                            break;
                        }
                        u -= w;
                    }
                    let pool = pools[pick];
                    out.push(pool[rng.random_range(0..pool.len())]);
                }
                Ok(out)
            }
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        mix: &MixSpec,
        rng: &mut R,
    ) -> Result<Vec<Transition>> {
        Ok(self
            .sample_indices(batch_size, mix, rng)?
            .into_iter()
            .map(|i| self.transitions[i])
            .collect())
    }

    /// New buffer with the rewards of `source_id` multiplied by `factor`.
    pub fn scale_rewards(&self, source_id: u32, factor: f64) -> Result<ReplayBuffer> {
        if !factor.is_finite() {
            return Err(OdpError::config("probe.factor", "must be finite"));
        }
        if !self.by_source.contains_key(&source_id) {
            return Err(OdpError::config(
                "probe.source",
                format!("unknown source {source_id}"),
            ));
        }
        let mut out = self.clone();
        for &i in &self.by_source[&source_id] {
            let t = &mut out.transitions[i];
            t.reward = (f64::from(t.reward) * factor) as f32;
        }
        Ok(out)
    }

    pub fn stats_by_source(&self) -> Result<BTreeMap<u32, SourceStats>> {
        if self.is_empty() {
            return Err(OdpError::invalid("no statistics for an empty buffer"));
        }
        let mut sums: BTreeMap<u32, (usize, f64, usize)> = BTreeMap::new();
        for (i, t) in self.transitions.iter().enumerate() {
            let entry = sums.entry(t.source_id).or_default();
            entry.0 += 1;
            entry.1 += f64::from(t.reward);
            let fragment_ends = t.terminal
                || self
                    .transitions
                    .get(i + 1)
                    .is_none_or(|n| n.source_id != t.source_id);
            if fragment_ends {
                entry.2 += 1;
            }
        }
        Ok(sums
            .into_iter()
            .map(|(s, (count, total, episodes))| {
                (
                    s,
                    SourceStats {
                        count,
                        mean_reward: total / count as f64,
                        mean_episode_return: total / episodes.max(1) as f64,
                    },
                )
            })
            .collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + RECORD_BYTES * self.len());
        out.extend_from_slice(BUFFER_MAGIC);
        out.extend_from_slice(&BUFFER_VERSION.to_le_bytes());
        out.extend_from_slice(&(OBS_DIM as u32).to_le_bytes());
        out.extend_from_slice(&(ACT_DIM as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for t in &self.transitions {
            put(&mut out, &t.obs);
            put(&mut out, &t.action);
            put(&mut out, &[t.reward]);
            out.push(u8::from(t.terminal));
            put(&mut out, &t.next_obs);
            out.extend_from_slice(&t.source_id.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(BUFFER_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != BUFFER_VERSION {
            return Err(OdpError::format(at, format!("unsupported buffer version {version}")));
        }
        let at = r.offset();
        let obs_dim = r.u32("obs_dim")? as usize;
        if obs_dim != OBS_DIM {
            return Err(OdpError::format(at, format!("obs_dim {obs_dim}, expected {OBS_DIM}")));
        }
        let at = r.offset();
        let act_dim = r.u32("act_dim")? as usize;
        if act_dim != ACT_DIM {
            return Err(OdpError::format(at, format!("act_dim {act_dim}, expected {ACT_DIM}")));
        }
        let at = r.offset();
        let count = r.u64("count")?;
        let expected = (count as u128) * RECORD_BYTES as u128;
        if expected != r.remaining() as u128 {
            return Err(OdpError::format(
                at,
                format!(
                    "header declares {count} records ({expected} bytes) but {} bytes follow",
                    r.remaining()
                ),
            ));
        }
        let mut buf = ReplayBuffer::new();
        buf.transitions.reserve(count as usize);
        let fill = |r: &mut ByteReader, xs: &mut [f32]| -> Result<()> {
            for x in xs.iter_mut() {
                *x = r.f32("record")?;
            }
            Ok(())
        };
        for _ in 0..count {
            let at = r.offset();
            let mut t = Transition {
                obs: [0.0; OBS_DIM],
                action: [0.0; ACT_DIM],
                reward: 0.0,
                next_obs: [0.0; OBS_DIM],
                terminal: false,
                source_id: 0,
            };
            fill(&mut r, &mut t.obs)?;
            fill(&mut r, &mut t.action)?;
            t.reward = r.f32("reward")?;
            t.terminal = match r.u8("terminal")? {
                0 => false,
                1 => true,
                b => return Err(OdpError::format(at, format!("terminal flag {b} is not 0/1"))),
            };
            fill(&mut r, &mut t.next_obs)?;
            t.source_id = r.u32("source_id")?;
            buf.append(t)
                .map_err(|e| OdpError::format(at, format!("invalid record: {e}")))?;
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tr(reward: f64, source: u32) -> Transition {
        Transition::new(&[0.1; 6], &[0.5, -0.5], reward, &[0.2; 6], false, source)
    }

    fn random_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new();
        for _ in 0..n {
            let obs: Obs = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let next: Obs = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let act: Action = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            buf.append(Transition::new(
                &obs,
                &act,
                rng.random_range(-2.0..2.0),
                &next,
                rng.random_bool(0.05),
                rng.random_range(0..3),
            ))
            .unwrap();
        }
        buf
    }

    #[test]
    fn append_counts_sources() {
        let mut buf = ReplayBuffer::new();
        buf.append(tr(1.0, 0)).unwrap();
        buf.append(tr(1.0, 1)).unwrap();
        buf.append(tr(1.0, 0)).unwrap();
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.source_counts(), BTreeMap::from([(0, 2), (1, 1)]));
    }

    #[test]
    fn append_rejects_bad_transitions() {
        let mut buf = ReplayBuffer::new();
        assert!(buf.append(tr(f64::NAN, 0)).is_err());
        let mut t = tr(0.0, 0);
        t.action[0] = 1.5;
        assert!(buf.append(t).is_err());
        assert!(buf.is_empty());
    }

    #[test]
    fn roundtrip_bit_exact() {
        let buf = random_buffer(10_000, 1);
        let back = ReplayBuffer::decode(&buf.encode()).unwrap();
        assert_eq!(buf, back);
        assert_eq!(ReplayBuffer::decode(&ReplayBuffer::new().encode()).unwrap(), ReplayBuffer::new());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.odpb");
        let buf = random_buffer(50, 2);
        buf.save(&path).unwrap();
        assert_eq!(ReplayBuffer::load(&path).unwrap(), buf);
    }

    #[test]
    fn record_layout() {
        let mut buf = ReplayBuffer::new();
        buf.append(tr(1.0, 7)).unwrap();
        let bytes = buf.encode();
        assert_eq!(bytes.len(), 24 + 65);
        assert_eq!(&bytes[..4], b"ODPB");
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[85..89].try_into().unwrap()), 7);
    }

    #[test]
    fn corrupted_files_rejected() {
        let buf = random_buffer(3, 3);
        let mut bytes = buf.encode();
        assert!(matches!(
            ReplayBuffer::decode(&bytes[..bytes.len() - 1]),
            Err(OdpError::Format { offset: 16, .. })
        ));
        bytes[1] = b'X';
        assert!(matches!(ReplayBuffer::decode(&bytes), Err(OdpError::Format { offset: 0, .. })));
        let mut v2 = buf.encode();
        v2[4] = 2;
        assert!(matches!(ReplayBuffer::decode(&v2), Err(OdpError::Format { offset: 4, .. })));
    }

    #[test]
    fn scale_rewards_touches_only_source() {
        let buf = ReplayBuffer::from_transitions([tr(2.0, 0), tr(3.0, 1), tr(-1.0, 1)]).unwrap();
        let half = buf.scale_rewards(1, 0.5).unwrap();
        let r: Vec<f32> = half.iter().map(|t| t.reward).collect();
        assert_eq!(r, vec![2.0, 1.5, -0.5]);
        assert_eq!(buf.get(1).unwrap().reward, 3.0);
        assert_eq!(buf.scale_rewards(1, 1.0).unwrap(), buf);
        assert!(buf.scale_rewards(1, 0.0).unwrap().filter_source(1).iter().all(|t| t.reward == 0.0));
        assert!(matches!(buf.scale_rewards(9, 0.5), Err(OdpError::Config { .. })));
    }

    #[test]
    fn single_source_uniform_sampling() {
        let buf = ReplayBuffer::from_transitions((0..10).map(|_| tr(0.0, 4))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample_batch(100, &MixSpec::Uniform, &mut rng).unwrap();
        assert!(batch.iter().all(|t| t.source_id == 4));
    }

    #[test]
    fn ratio_sampling_requires_nonempty_sources() {
        let buf = ReplayBuffer::from_transitions([tr(0.0, 0)]).unwrap();
        let mix = MixSpec::ratio(&[(0, 1.0), (1, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample_batch(4, &mix, &mut rng), Err(OdpError::Config { .. })));
        assert!(ReplayBuffer::new().sample_batch(1, &MixSpec::Uniform, &mut rng).is_err());
        assert!(MixSpec::ratio(&[(0, 0.0)]).is_err());
    }

    #[test]
    fn stats_are_exact() {
        let mut buf = ReplayBuffer::new();
        for s in [0, 0, 1, 1, 1] {
            buf.append(tr(1.0, s)).unwrap();
        }
        let stats = buf.stats_by_source().unwrap();
        assert_eq!(stats[&0].count, 2);
        assert_eq!(stats[&1].count, 3);
        assert_eq!(stats[&0].mean_reward, 1.0);
        assert_eq!(stats[&1].mean_reward, 1.0);
        assert_eq!(stats[&1].mean_episode_return, 3.0);
        assert!(ReplayBuffer::new().stats_by_source().is_err());
    }
}
