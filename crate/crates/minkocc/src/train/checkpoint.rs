//! Checkpoint container: parameters, optimizer moments, running norm stats,
//! step counter, RNG position and the exact training config.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::mocc::Container;
use crate::optim::Adam;
use crate::params::{ParamStore, StatsStore};
use crate::tape::Arr;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: Adam,
    pub stats: StatsStore,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub grid: GridConfig,
    pub config_json: String,
    pub config_hash: [u8; 32],
}

pub fn config_hash(config_json: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    h.finalize().into()
}

fn push_bytes(c: &mut Container, name: &str, bytes: &[u8]) {
    let v: Vec<i32> = bytes.iter().map(|&b| b as i32).collect();
    c.push_i32(name, Array1::from_vec(v).into_dyn());
}

fn read_bytes(c: &Container, path: &Path, name: &str) -> Result<Vec<u8>> {
    let a = c.require(path, name)?.as_i32(path, name)?;
    a.iter()
        .map(|&v| {
            u8::try_from(v).map_err(|_| Error::container(path, format!("{name}: byte out of range")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    adam: &Adam,
    stats: &StatsStore,
    step: u64,
    rng: &ChaCha8Rng,
    grid: &GridConfig,
    config_json: &str,
) -> Result<()> {
    let mut c = Container::new();
    c.push_i32("meta.step", Array1::from_vec(vec![step as i32]).into_dyn());
    c.push_i32(
        "grid.dims",
        Array1::from_vec(grid.dims.iter().map(|&d| d as i32).collect()).into_dyn(),
    );
    c.push_f64(
        "grid.extent",
        Array1::from_vec(vec![grid.voxel_size, grid.min[0], grid.min[1], grid.min[2]]).into_dyn(),
    );
    push_bytes(&mut c, "config.json", config_json.as_bytes());
    push_bytes(&mut c, "config.hash", &config_hash(config_json));

    push_bytes(&mut c, "rng.seed", &rng.get_seed());
    let pos = rng.get_word_pos();
    let words: Vec<i32> = (0..4).map(|i| ((pos >> (32 * i)) & 0xffff_ffff) as u32 as i32).collect();
    c.push_i32("rng.word_pos", Array1::from_vec(words).into_dyn());

    for (name, p) in params.iter() {
        c.push_f64(&format!("param.{name}"), p.value.clone());
    }
    let (t, m, v) = adam.state();
    c.push_i32("adam.t", Array1::from_vec(vec![t as i32]).into_dyn());
    for (name, a) in m {
        c.push_f64(&format!("adam.m.{name}"), a.clone());
    }
    for (name, a) in v {
        c.push_f64(&format!("adam.v.{name}"), a.clone());
    }
    for (name, mean, var) in stats.snapshot() {
        c.push_f64(&format!("stats.{name}.mean"), mean);
        c.push_f64(&format!("stats.{name}.var"), var);
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    let step_arr = c.require(path, "meta.step")?.as_i32(path, "meta.step")?;
    let step = step_arr
        .iter()
        .next()
        .copied()
        .ok_or_else(|| Error::container(path, "meta.step is empty"))? as u64;

    let dims = c.require(path, "grid.dims")?.as_i32(path, "grid.dims")?;
    let ext = c.require(path, "grid.extent")?.as_f64(path, "grid.extent")?;
    if dims.len() != 3 || ext.len() != 4 {
        return Err(Error::container(path, "malformed grid records"));
    }
    let dv: Vec<i32> = dims.iter().copied().collect();
    let ev: Vec<f64> = ext.iter().copied().collect();
    let grid = GridConfig {
        dims: [dv[0] as usize, dv[1] as usize, dv[2] as usize],
        voxel_size: ev[0],
        min: [ev[1], ev[2], ev[3]],
    };

    let config_json = String::from_utf8(read_bytes(&c, path, "config.json")?)
        .map_err(|_| Error::container(path, "config.json is not utf-8"))?;
    let hash_stored = read_bytes(&c, path, "config.hash")?;
    let hash = config_hash(&config_json);
    if hash_stored != hash {
        return Err(Error::container(path, "config hash does not match config body"));
    }

    let seed_bytes = read_bytes(&c, path, "rng.seed")?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::container(path, "rng.seed must hold 32 bytes"))?;
    let pos_arr = c.require(path, "rng.word_pos")?.as_i32(path, "rng.word_pos")?;
    if pos_arr.len() != 4 {
        return Err(Error::container(path, "rng.word_pos must hold 4 words"));
    }
    let mut pos: u128 = 0;
    for (i, &w) in pos_arr.iter().enumerate() {
        pos |= (w as u32 as u128) << (32 * i);
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);

    let mut params = ParamStore::new();
    let mut m: BTreeMap<String, Arr> = BTreeMap::new();
    let mut v: BTreeMap<String, Arr> = BTreeMap::new();
    let mut stat_entries: BTreeMap<String, (Option<Arr>, Option<Arr>)> = BTreeMap::new();
    for (name, _) in c.iter() {
        if let Some(p) = name.strip_prefix("param.") {
            params.insert(p, c.require(path, name)?.as_f64(path, name)?.clone());
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            m.insert(p.to_string(), c.require(path, name)?.as_f64(path, name)?.clone());
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            v.insert(p.to_string(), c.require(path, name)?.as_f64(path, name)?.clone());
        } else if let Some(p) = name.strip_prefix("stats.") {
            let arr = c.require(path, name)?.as_f64(path, name)?.clone();
            if let Some(base) = p.strip_suffix(".mean") {
                stat_entries.entry(base.to_string()).or_default().0 = Some(arr);
            } else if let Some(base) = p.strip_suffix(".var") {
                stat_entries.entry(base.to_string()).or_default().1 = Some(arr);
            }
        }
    }
    let t_arr = c.require(path, "adam.t")?.as_i32(path, "adam.t")?;
    let t = t_arr
        .iter()
        .next()
        .copied()
        .ok_or_else(|| Error::container(path, "adam.t is empty"))? as u64;
    let mut adam = Adam::new();
    adam.restore(t, m, v);

    let stats = StatsStore::new();
    let entries: Vec<(String, Arr, Arr)> = stat_entries
        .into_iter()
        .map(|(name, (mean, var))| match (mean, var) {
            (Some(mean), Some(var)) => Ok((name, mean, var)),
            _ => Err(Error::container(path, "stats record missing mean or var")),
        })
        .collect::<Result<_>>()?;
    stats.restore(entries);

    Ok(Checkpoint {
        params,
        adam,
        stats,
        step,
        rng,
        grid,
        config_json,
        config_hash: hash,
    })
}
