//! Self-describing binary checkpoints: text metadata, f64 scalars and named
//! f32 tensors, all little-endian.
//!
//! Layout: magic `SLCKPT01`, u32 format version, then three sections, each a
//! u32 count followed by entries. Strings are u32 length + UTF-8 bytes;
//! tensors are name, u32 rank, u64 dims, raw f32 data.

use super::nn::{Adam, Param, ParamStore, Real};
use rand::SeedableRng;

use super::sac::{Actor, Sac, SacConfig, ScalarAdam};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SLCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub scalars: Vec<(String, f64)>,
    pub tensors: Vec<Param>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.scalars.len() as u32).to_le_bytes());
        for (k, v) in &self.scalars {
            put_str(&mut out, k);
            out.extend(v.to_le_bytes());
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            ck.scalars.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| Real::from_le_bytes(c.try_into().unwrap())).collect();
            ck.tensors.push(Param { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn scalar(&self, key: &str) -> Result<f64> {
        self.scalars
            .iter()
            .find(|(k, _)| k == key)
            .map(|&(_, v)| v)
            .ok_or_else(|| bad(format!("missing scalar '{key}'")))
    }

    fn tensor(&self, name: &str) -> Result<&Param> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("missing tensor '{name}'")))
    }

}

fn push_store(ck: &mut Checkpoint, prefix: &str, store: &ParamStore) {
    for p in &store.params {
        ck.tensors.push(Param {
            name: format!("{prefix}/{}", p.name),
            ..p.clone()
        });
    }
}

fn push_moments(ck: &mut Checkpoint, prefix: &str, store: &ParamStore, moments: &[Vec<Real>]) {
    for (p, m) in store.params.iter().zip(moments) {
        ck.tensors.push(Param {
            name: format!("{prefix}/{}", p.name),
            shape: p.shape.clone(),
            data: m.clone(),
        });
    }
}

fn load_store(ck: &Checkpoint, prefix: &str, store: &mut ParamStore) -> Result<()> {
    for p in store.params.iter_mut() {
        let t = ck.tensor(&format!("{prefix}/{}", p.name))?;
        if t.shape != p.shape {
            return Err(bad(format!("tensor '{}' has shape {:?}, expected {:?}", t.name, t.shape, p.shape)));
        }
        p.data.clone_from(&t.data);
    }
    Ok(())
}

fn load_moments(ck: &Checkpoint, prefix: &str, store: &ParamStore, moments: &mut [Vec<Real>]) -> Result<()> {
    for (p, m) in store.params.iter().zip(moments.iter_mut()) {
        let t = ck.tensor(&format!("{prefix}/{}", p.name))?;
        if t.data.len() != m.len() {
            return Err(bad(format!("moment '{}' has wrong size", t.name)));
        }
        m.clone_from(&t.data);
    }
    Ok(())
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, store: &ParamStore, opt: &Adam) {
    ck.scalars.push((format!("{prefix}.step"), opt.step as f64));
    push_moments(ck, &format!("{prefix}.m"), store, &opt.m);
    push_moments(ck, &format!("{prefix}.v"), store, &opt.v);
}

fn load_adam(ck: &Checkpoint, prefix: &str, store: &ParamStore, opt: &mut Adam) -> Result<()> {
    opt.step = ck.scalar(&format!("{prefix}.step"))? as u64;
    load_moments(ck, &format!("{prefix}.m"), store, &mut opt.m)?;
    load_moments(ck, &format!("{prefix}.v"), store, &mut opt.v)
}

/// Full agent state: networks, targets, optimizer moments and temperature.
pub fn sac_to_checkpoint(sac: &Sac) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    let config = serde_json::to_string(&sac.config).map_err(|e| bad(e.to_string()))?;
    ck.meta.push(("sac_config".into(), config));
    let a = &sac.actor;
    for (k, v) in [
        ("history_channels", a.history_channels),
        ("history_len", a.history_len),
        ("flat_dim", a.flat_dim),
        ("action_dim", a.action_dim),
    ] {
        ck.scalars.push((k.into(), v as f64));
    }
    ck.scalars.push(("log_alpha".into(), sac.log_alpha));
    ck.scalars.push(("updates".into(), sac.updates as f64));
    ck.scalars.push(("alpha_opt.m".into(), sac.alpha_opt.m));
    ck.scalars.push(("alpha_opt.v".into(), sac.alpha_opt.v));
    ck.scalars.push(("alpha_opt.step".into(), sac.alpha_opt.step as f64));
    push_store(&mut ck, "actor", &a.store);
    push_adam(&mut ck, "opt.actor", &a.store, &sac.actor_opt);
    for i in 0..2 {
        push_store(&mut ck, &format!("critic{i}"), &sac.critics[i].store);
        push_store(&mut ck, &format!("target{i}"), &sac.targets[i].store);
        push_adam(&mut ck, &format!("opt.critic{i}"), &sac.critics[i].store, &sac.critic_opts[i]);
    }
    Ok(ck)
}

pub fn sac_config_of(ck: &Checkpoint) -> Result<SacConfig> {
    let text = ck.meta("sac_config").ok_or_else(|| bad("missing agent configuration"))?;
    serde_json::from_str(text).map_err(|e| bad(e.to_string()))
}

fn dims(ck: &Checkpoint) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for (slot, key) in out.iter_mut().zip(["history_channels", "history_len", "flat_dim", "action_dim"]) {
        *slot = ck.scalar(key)? as usize;
    }
    Ok(out)
}

/// Actor alone, enough for deterministic evaluation.
pub fn actor_from_checkpoint(ck: &Checkpoint) -> Result<Actor> {
    let config = sac_config_of(ck)?;
    let [c, l, f, a] = dims(ck)?;
    // initial values are overwritten; any generator works
    let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
    let mut actor = Actor::new(&config.network, c, l, f, a, &mut rng);
    load_store(ck, "actor", &mut actor.store)?;
    Ok(actor)
}

pub fn sac_from_checkpoint(ck: &Checkpoint) -> Result<Sac> {
    let config = sac_config_of(ck)?;
    let [c, l, f, a] = dims(ck)?;
    let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
    let mut sac = Sac::new(config, c, l, f, a, &mut rng)?;
    load_store(ck, "actor", &mut sac.actor.store)?;
    load_adam(ck, "opt.actor", &sac.actor.store, &mut sac.actor_opt)?;
    for i in 0..2 {
        load_store(ck, &format!("critic{i}"), &mut sac.critics[i].store)?;
        load_store(ck, &format!("target{i}"), &mut sac.targets[i].store)?;
        load_adam(ck, &format!("opt.critic{i}"), &sac.critics[i].store, &mut sac.critic_opts[i])?;
    }
    sac.log_alpha = ck.scalar("log_alpha")?;
    sac.updates = ck.scalar("updates")? as u64;
    sac.alpha_opt = ScalarAdam {
        m: ck.scalar("alpha_opt.m")?,
        v: ck.scalar("alpha_opt.v")?,
        step: ck.scalar("alpha_opt.step")? as u64,
    };
    Ok(sac)
}

/// Swap a stored actor (e.g. the best evaluation snapshot) into a checkpoint.
pub fn with_actor(mut ck: Checkpoint, actor: &ParamStore) -> Checkpoint {
    ck.tensors.retain(|t| !t.name.starts_with("actor/"));
    let mut head = Checkpoint::default();
    push_store(&mut head, "actor", actor);
    head.tensors.append(&mut ck.tensors);
    ck.tensors = head.tensors;
    ck
}
