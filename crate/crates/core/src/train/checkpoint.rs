//! Checkpoint serialization.
//!
//! A checkpoint is a flat list of named f32 tensors in a little-endian
//! container: magic `SMGN`, a format version, a tensor count, then per
//! tensor a length-prefixed UTF-8 name, the rank, the dimensions, and the
//! raw values. Alongside the network weights the file stores optimizer
//! moments (`opt.gen.*`, `opt.disc.*`), the global step (`meta.step`), and
//! enough structural metadata (`meta.gen_config`, `meta.disc.k*.spec`) to
//! rebuild the parameter structures without outside configuration.
//!
//! Writes go to a sibling temporary file first and are renamed into place,
//! so a crash mid-write never leaves a half-written checkpoint behind.

use std::collections::BTreeMap;
use std::path::Path;

use crate::discriminator::{init_discriminator, DiscriminatorParams, RwdSpec};
use crate::error::{Error, Result};
use crate::features::ByteReader;
use crate::generator::{init_generator, GeneratorConfig, GeneratorParams};
use crate::num::Real;
use crate::tensor::Tensor;
use crate::train::adam::AdamState;

/// First four bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMGN";
/// Container format version this build reads and writes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything the training loop needs to stop and resume: parameters,
/// optimizer moments, and the global step counter. The discriminator is
/// absent in checkpoints written during the reconstruction-only phase.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: GeneratorParams<Tensor<f32>>,
    pub discriminator: Option<DiscriminatorParams<Tensor<f32>>>,
    pub opt_gen: AdamState<f32>,
    pub opt_disc: AdamState<f32>,
    pub step: u64,
}

fn encode_gen_config(c: &GeneratorConfig) -> Tensor<f32> {
    Tensor::from_vec(
        &[6],
        vec![
            c.noise_channels as f32,
            c.channels as f32,
            c.mel_channels as f32,
            c.kernel_size as f32,
            c.cond_kernel_size as f32,
            c.stages as f32,
        ],
    )
    .expect("six-element tensor")
}

fn decode_usize(v: f32, what: &str) -> Result<usize> {
    if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > 1e9 {
        return Err(Error::config(format!("checkpoint field {what} holds {v}, expected a small whole number")));
    }
    Ok(v as usize)
}

fn decode_gen_config(t: &Tensor<f32>) -> Result<GeneratorConfig> {
    let d = t.data();
    if d.len() != 6 {
        return Err(Error::config(format!(
            "meta.gen_config has {} entries, expected 6",
            d.len()
        )));
    }
    let cfg = GeneratorConfig {
        noise_channels: decode_usize(d[0], "noise_channels")?,
        channels: decode_usize(d[1], "channels")?,
        mel_channels: decode_usize(d[2], "mel_channels")?,
        kernel_size: decode_usize(d[3], "kernel_size")?,
        cond_kernel_size: decode_usize(d[4], "cond_kernel_size")?,
        stages: decode_usize(d[5], "stages")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn encode_rwd_spec(s: &RwdSpec) -> Tensor<f32> {
    let mut v = vec![
        s.window_size as f32,
        s.num_bands as f32,
        s.dblock_kernel as f32,
        s.score_kernel as f32,
        s.dblock_channels.len() as f32,
    ];
    v.extend(s.dblock_channels.iter().map(|&c| c as f32));
    v.extend(s.strides.iter().map(|&c| c as f32));
    Tensor::from_vec(&[v.len()], v).expect("spec tensor")
}

fn decode_rwd_spec(t: &Tensor<f32>) -> Result<RwdSpec> {
    let d = t.data();
    if d.len() < 5 {
        return Err(Error::config("discriminator spec tensor is too short".to_string()));
    }
    let blocks = decode_usize(d[4], "block count")?;
    if d.len() != 5 + 2 * blocks {
        return Err(Error::config(format!(
            "discriminator spec tensor has {} entries, expected {}",
            d.len(),
            5 + 2 * blocks
        )));
    }
    let spec = RwdSpec {
        window_size: decode_usize(d[0], "window_size")?,
        num_bands: decode_usize(d[1], "num_bands")?,
        dblock_kernel: decode_usize(d[2], "dblock_kernel")?,
        score_kernel: decode_usize(d[3], "score_kernel")?,
        dblock_channels: d[5..5 + blocks]
            .iter()
            .map(|&v| decode_usize(v, "block channels"))
            .collect::<Result<_>>()?,
        strides: d[5 + blocks..]
            .iter()
            .map(|&v| decode_usize(v, "block stride"))
            .collect::<Result<_>>()?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Flatten the train state into the named-tensor map that goes on disk.
fn collect_tensors(state: &TrainState) -> BTreeMap<String, Tensor<f32>> {
    let mut map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    state.generator.visit(&mut |name, t: &Tensor<f32>| {
        map.insert(name, t.clone());
    });
    map.insert("meta.gen_config".to_string(), encode_gen_config(&state.generator.config));
    if let Some(disc) = &state.discriminator {
        disc.visit(&mut |name, t: &Tensor<f32>| {
            map.insert(name, t.clone());
        });
        for (i, rwd) in disc.rwds.iter().enumerate() {
            map.insert(format!("meta.disc.k{}.spec", i + 1), encode_rwd_spec(&rwd.spec));
        }
    }
    state.opt_gen.export("opt.gen", &mut |name, t| {
        map.insert(name, t);
    });
    state.opt_disc.export("opt.disc", &mut |name, t| {
        map.insert(name, t);
    });
    map.insert(
        "meta.step".to_string(),
        Tensor::from_vec(&[1], vec![state.step as f32]).expect("one-element tensor"),
    );
    map
}

/// Serialize named tensors into the container bytes.
fn encode(map: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, tensor) in map {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::usage(format!("tensor name too long: {name}")));
        }
        if tensor.dims().len() > u8::MAX as usize {
            return Err(Error::usage(format!("tensor rank too high for {name}")));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(tensor.dims().len() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write a checkpoint atomically: serialize, write a sibling temporary
/// file, then rename over the destination.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let map = collect_tensors(state);
    let bytes = encode(&map)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read the raw named-tensor map of a checkpoint file. Truncated or
/// malformed files yield a Format error carrying the byte offset.
pub fn read_checkpoint_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = ByteReader::open(path)?;
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}"), at));
    }
    let count = r.u32("tensor count")? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let at = r.offset();
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::format("tensor name is not UTF-8".to_string(), at))?;
        let ndim = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("tensor dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let at = r.offset();
        if numel > (1 << 31) {
            return Err(Error::format(format!("tensor {name} declares {numel} values"), at));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32("tensor value")?);
        }
        let tensor = Tensor::from_vec(&dims, data)
            .map_err(|e| Error::format(format!("tensor {name}: {e}"), at))?;
        if map.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(format!("duplicate tensor name {name}"), at));
        }
    }
    r.done()?;
    Ok(map)
}

fn take_tensor(
    map: &BTreeMap<String, Tensor<f32>>,
    name: &str,
    expected: &[usize],
) -> Result<Tensor<f32>> {
    let t = map
        .get(name)
        .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name}")))?;
    if t.dims() != expected {
        return Err(Error::config(format!(
            "checkpoint tensor {name} has shape {:?}, expected {:?}",
            t.dims(),
            expected
        )));
    }
    Ok(t.clone())
}

/// Rebuild a full training state from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let map = read_checkpoint_tensors(path)?;

    let gen_config = decode_gen_config(
        map.get("meta.gen_config")
            .ok_or_else(|| Error::config("checkpoint is missing meta.gen_config".to_string()))?,
    )?;
    let mut generator = init_generator::<f32>(gen_config, 0)?;
    let mut fill_err: Option<Error> = None;
    generator.visit_mut(&mut |name, t| {
        if fill_err.is_none() {
            match take_tensor(&map, &name, t.dims()) {
                Ok(v) => *t = v,
                Err(e) => fill_err = Some(e),
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }

    let discriminator = if map.contains_key("meta.disc.k1.spec") {
        let mut specs = Vec::new();
        let mut i = 1;
        while let Some(t) = map.get(&format!("meta.disc.k{i}.spec")) {
            specs.push(decode_rwd_spec(t)?);
            i += 1;
        }
        let mut disc = init_discriminator::<f32>(specs, 0)?;
        let mut fill_err: Option<Error> = None;
        disc.visit_mut(&mut |name, t| {
            if fill_err.is_none() {
                match take_tensor(&map, &name, t.dims()) {
                    Ok(v) => *t = v,
                    Err(e) => fill_err = Some(e),
                }
            }
        });
        if let Some(e) = fill_err {
            return Err(e);
        }
        Some(disc)
    } else {
        None
    };

    let opt_gen = AdamState::import("opt.gen", &map)?;
    let opt_disc = AdamState::import("opt.disc", &map)?;
    let step_t = map
        .get("meta.step")
        .ok_or_else(|| Error::config("checkpoint is missing meta.step".to_string()))?;
    let step = decode_usize(step_t.data().first().copied().unwrap_or(-1.0), "meta.step")? as u64;

    Ok(TrainState { generator, discriminator, opt_gen, opt_disc, step })
}

/// Order-independent digest of named tensors (FNV-1a over names, shapes,
/// and value bits). Two calls agree exactly when every tensor agrees
/// bitwise; used to assert that an update left the frozen player untouched.
pub fn state_fingerprint<T: Real>(params: &[(String, &Tensor<T>)]) -> u64 {
    let mut entries: Vec<(&String, &&Tensor<T>)> =
        params.iter().map(|(n, t)| (n, t)).collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    };
    for (name, tensor) in entries {
        for &b in name.as_bytes() {
            eat(b);
        }
        eat(0xfe);
        for &d in tensor.dims() {
            for b in (d as u64).to_le_bytes() {
                eat(b);
            }
        }
        eat(0xff);
        for v in tensor.data() {
            for b in v.to_f64_().to_bits().to_le_bytes() {
                eat(b);
            }
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::init_discriminator;
    use crate::generator::init_generator;
    use crate::train::adam::adam_step;
    use std::collections::HashMap;

    fn small_gen_config() -> GeneratorConfig {
        GeneratorConfig {
            noise_channels: 4,
            channels: 6,
            mel_channels: 3,
            kernel_size: 3,
            cond_kernel_size: 3,
            stages: 2,
        }
    }

    fn small_specs() -> Vec<RwdSpec> {
        vec![
            RwdSpec {
                window_size: 64,
                num_bands: 1,
                dblock_channels: vec![4, 8],
                dblock_kernel: 5,
                strides: vec![2, 2],
                score_kernel: 3,
            },
            RwdSpec {
                window_size: 128,
                num_bands: 2,
                dblock_channels: vec![4, 8],
                dblock_kernel: 5,
                strides: vec![2, 2],
                score_kernel: 3,
            },
        ]
    }

    fn sample_state(with_disc: bool) -> TrainState {
        let generator = init_generator::<f32>(small_gen_config(), 5).unwrap();
        let discriminator =
            with_disc.then(|| init_discriminator::<f32>(small_specs(), 9).unwrap());
        TrainState {
            generator,
            discriminator,
            opt_gen: AdamState::new(),
            opt_disc: AdamState::new(),
            step: 1234,
        }
    }

    fn gen_pairs(g: &GeneratorParams<Tensor<f32>>) -> Vec<(String, Tensor<f32>)> {
        let mut v = Vec::new();
        g.visit(&mut |n, t: &Tensor<f32>| v.push((n, t.clone())));
        v
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smgn");
        let state = sample_state(true);
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.step, 1234);
        let a = gen_pairs(&state.generator);
        let b = gen_pairs(&loaded.generator);
        assert_eq!(a.len(), b.len());
        for ((n0, t0), (n1, t1)) in a.iter().zip(b.iter()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.dims(), t1.dims());
            for (x, y) in t0.data().iter().zip(t1.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{n0}");
            }
        }
        let da = state.discriminator.as_ref().unwrap();
        let db = loaded.discriminator.as_ref().unwrap();
        let mut pa = Vec::new();
        da.visit(&mut |n, t: &Tensor<f32>| pa.push((n, t)));
        let mut pb = Vec::new();
        db.visit(&mut |n, t: &Tensor<f32>| pb.push((n, t)));
        assert_eq!(state_fingerprint(&pa), state_fingerprint(&pb));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smgn");
        let state = sample_state(false);
        save_checkpoint(&path, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() / 2;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => {
                assert!(offset > 0 && offset <= cut as u64, "offset {offset} of cut {cut}");
            }
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn reconstruction_phase_checkpoint_has_no_discriminator() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretrain.smgn");
        save_checkpoint(&path, &sample_state(false)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.discriminator.is_none());
        assert_eq!(loaded.step, 1234);
    }

    #[test]
    fn optimizer_state_survives_the_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smgn");
        let mut state = sample_state(false);
        // Advance the optimizer so the moments are non-trivial.
        let mut grads: HashMap<String, Tensor<f32>> = HashMap::new();
        state.generator.visit(&mut |name, t: &Tensor<f32>| {
            grads.insert(name, Tensor::filled(t.dims(), 0.25));
        });
        let mut refs = Vec::new();
        state.generator.visit_mut(&mut |n, t| refs.push((n, t)));
        adam_step(&mut state.opt_gen, refs, &grads, 1e-3, None).unwrap();
        assert_eq!(state.opt_gen.step_count(), 1);
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.opt_gen.step_count(), 1);
        assert_eq!(loaded.opt_disc.step_count(), 0);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.smgn");
        std::fs::write(&path, b"WAVEnot-a-checkpoint").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn no_temporary_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smgn");
        save_checkpoint(&path, &sample_state(false)).unwrap();
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");
    }

    #[test]
    fn fingerprint_tracks_value_changes() {
        let state = sample_state(false);
        let mut pairs = Vec::new();
        state.generator.visit(&mut |n, t: &Tensor<f32>| pairs.push((n, t)));
        let before = state_fingerprint(&pairs);

        let mut altered = sample_state(false);
        altered.generator.visit_mut(&mut |name, t| {
            if name == "input_conv.bias" {
                t.data_mut()[0] += 1.0;
            }
        });
        let mut pairs2 = Vec::new();
        altered.generator.visit(&mut |n, t: &Tensor<f32>| pairs2.push((n, t)));
        assert_ne!(before, state_fingerprint(&pairs2));
    }
}
