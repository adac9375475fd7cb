use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::trainer::Trainer;
use crate::binio::{put_string, put_tensor, Reader};
use crate::error::{Error, Result};
use crate::models::{Generator, Saad};
use crate::nn::{AdamState, ParamStore};
use crate::seed::RngState;

const MAGIC: &[u8; 8] = b"TXFCKPT\0";
const VERSION: u32 = 1;
const KIND: &str = "checkpoint";

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub gen_adam: AdamState,
    pub disc_adam: AdamState,
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        put_string(out, &p.name);
        put_tensor(out, &p.value);
    }
}

fn read_store(r: &mut Reader<'_>) -> Result<ParamStore> {
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let value = r.tensor()?;
        store
            .insert(name, value)
            .map_err(|e| Error::corrupt(KIND, e.to_string()))?;
    }
    Ok(store)
}

fn put_adam(out: &mut Vec<u8>, a: &AdamState) {
    for v in [a.beta1, a.beta2, a.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&a.t.to_le_bytes());
    out.extend_from_slice(&(a.m.len() as u32).to_le_bytes());
    for t in a.m.iter().chain(&a.v) {
        put_tensor(out, t);
    }
}

fn read_adam(r: &mut Reader<'_>) -> Result<AdamState> {
    let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
    let t = r.u64()?;
    let n = r.u32()? as usize;
    let m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    Ok(AdamState {
        beta1,
        beta2,
        eps,
        t,
        m,
        v,
    })
}

fn check_against(store: &ParamStore, adam: &AdamState, expected: &ParamStore, what: &str) -> Result<()> {
    let shapes = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
        s.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    };
    if shapes(store) != shapes(expected) {
        return Err(Error::corrupt(KIND, format!("{what} parameters do not match the stored config")));
    }
    let ok = adam.m.len() == store.len()
        && store
            .iter()
            .zip(adam.m.iter().zip(&adam.v))
            .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape());
    if !ok {
        return Err(Error::corrupt(KIND, format!("{what} optimizer state does not match its parameters")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            step: t.step,
            rng: RngState::capture(&t.rng),
            gen_params: t.gen_params.clone(),
            disc_params: t.disc_params.clone(),
            gen_adam: t.gen_adam.clone(),
            disc_adam: t.disc_adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let generator = Generator::new(self.config.generator_config())?;
        let saad = Saad::new(self.config.saad_config())?;
        Ok(Trainer {
            generator,
            saad,
            gen_params: self.gen_params,
            disc_params: self.disc_params,
            gen_adam: self.gen_adam,
            disc_adam: self.disc_adam,
            step: self.step,
            rng: self.rng.restore(),
            config: self.config,
        })
    }

    /// Magic, version, config echo, step, RNG position, both parameter tables
    /// (name, shape, little-endian f64 values), both optimizer states, then a
    /// CRC-32 of all preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_string(&mut out, &self.config.echo());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_store(&mut out, &self.gen_params);
        put_store(&mut out, &self.disc_params);
        put_adam(&mut out, &self.gen_adam);
        put_adam(&mut out, &self.disc_adam);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::corrupt(KIND, "truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::corrupt(KIND, "checksum mismatch"));
        }
        let mut r = Reader::new(body, KIND);
        if r.bytes(MAGIC.len())? != MAGIC {
            return Err(Error::corrupt(KIND, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::corrupt(KIND, format!("unsupported version {version}")));
        }
        let config = TrainConfig::from_text(&r.string()?)?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.bytes(32)?.try_into().expect("32 bytes"),
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let gen_params = read_store(&mut r)?;
        let disc_params = read_store(&mut r)?;
        let gen_adam = read_adam(&mut r)?;
        let disc_adam = read_adam(&mut r)?;
        r.finish()?;

        let fresh = Trainer::new(config.clone())?;
        check_against(&gen_params, &gen_adam, &fresh.gen_params, "generator")?;
        check_against(&disc_params, &disc_adam, &fresh.disc_params, "discriminator")?;
        Ok(Self {
            config,
            step,
            rng,
            gen_params,
            disc_params,
            gen_adam,
            disc_adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Bitwise equality, treating every float by its bit pattern.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

/// Hex SHA-256 of a checkpoint's serialized form. (A CRC over bytes that end
/// in their own CRC is a constant, so the trailer checksum cannot serve here.)
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
