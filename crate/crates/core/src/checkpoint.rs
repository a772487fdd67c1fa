//! Versioned checkpoint container: a text header (run configuration, step
//! counters, channel statistics) followed by named binary tensors
//! (name, dtype, shape, row-major little-endian payload). Reloading a
//! checkpoint reproduces training bit-exactly from the saved step.

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::ParamStore;

const MAGIC: &str = "QREID-CHECKPOINT";
const VERSION: u32 = 1;
const SECTION_BREAK: &str = "---";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub adam_t: u64,
    pub num_identities: usize,
    pub stats: ChannelStats,
    /// (name, shape, values) in parameter-store order, then Adam moments
    /// under `optim.m.*` / `optim.v.*`.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn f32_bits_csv(values: &[f32]) -> String {
    values
        .iter()
        .map(|v| format!("{:08x}", v.to_bits()))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f32_bits_csv(s: &str, expected: usize) -> Result<Vec<f32>> {
    let out: Vec<f32> = s
        .split(',')
        .map(|tok| u32::from_str_radix(tok, 16).map(f32::from_bits))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint(format!("bad float bits `{s}`")))?;
    if out.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} floats, got {}",
            out.len()
        )));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: &Adam, config: &RunConfig, step: u64) -> Checkpoint {
        let mut tensors = Vec::with_capacity(model.store.len() * 3);
        for (name, shape, values) in model.store.iter() {
            tensors.push((name.to_string(), shape.to_vec(), values.to_vec()));
        }
        for i in 0..model.store.len() {
            tensors.push((
                format!("optim.m.{}", model.store.name(i)),
                model.store.shape(i).to_vec(),
                adam.m[i].clone(),
            ));
        }
        for i in 0..model.store.len() {
            tensors.push((
                format!("optim.v.{}", model.store.name(i)),
                model.store.shape(i).to_vec(),
                adam.v[i].clone(),
            ));
        }
        Checkpoint {
            config: config.clone(),
            step,
            adam_t: adam.t,
            num_identities: model.num_identities,
            stats: model.stats,
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Rebuilds the model from the stored configuration and weights.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::init(
            self.config.model.clone(),
            self.num_identities,
            self.stats,
            self.config.seed,
        )?;
        for i in 0..model.store.len() {
            let name = model.store.name(i).to_string();
            let (_, shape, values) = self.tensor(&name)?;
            if shape != model.store.shape(i) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {:?}",
                    model.store.shape(i)
                )));
            }
            model.store.values_mut(i).copy_from_slice(values);
        }
        Ok(model)
    }

    /// Rebuilds the optimizer state aligned with `store`.
    pub fn restore_adam(&self, store: &ParamStore) -> Result<Adam> {
        let mut adam = Adam::new(store, &self.config.train);
        adam.t = self.adam_t;
        for i in 0..store.len() {
            let name = store.name(i);
            let (_, _, m) = self.tensor(&format!("optim.m.{name}"))?;
            let (_, _, v) = self.tensor(&format!("optim.v.{name}"))?;
            if m.len() != adam.m[i].len() || v.len() != adam.v[i].len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for `{name}` do not match the parameter size"
                )));
            }
            adam.m[i].copy_from_slice(m);
            adam.v[i].copy_from_slice(v);
        }
        Ok(adam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC} v{VERSION}")?;
        writeln!(out, "step={}", self.step)?;
        writeln!(out, "adam_t={}", self.adam_t)?;
        writeln!(out, "identities={}", self.num_identities)?;
        writeln!(out, "stats_mean={}", f32_bits_csv(&self.stats.mean))?;
        writeln!(out, "stats_std={}", f32_bits_csv(&self.stats.std))?;
        for line in self.config.render().lines() {
            writeln!(out, "config.{line}")?;
        }
        writeln!(out, "{SECTION_BREAK}")?;

        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, shape, values) in &self.tensors {
            let name_bytes = name.as_bytes();
            out.extend((name_bytes.len() as u16).to_le_bytes());
            out.extend(name_bytes);
            out.push(0u8); // dtype 0 = f32
            out.push(shape.len() as u8);
            for &extent in shape {
                out.extend((extent as u32).to_le_bytes());
            }
            for v in values {
                out.extend(v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        // header is the text before the section break line
        let break_marker = format!("\n{SECTION_BREAK}\n");
        let header_end = bytes
            .windows(break_marker.len())
            .position(|w| w == break_marker.as_bytes())
            .ok_or_else(|| Error::Checkpoint("missing tensor section".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
        let mut lines = header.lines();
        let first = lines.next().unwrap_or("");
        if first != format!("{MAGIC} v{VERSION}") {
            return Err(Error::Checkpoint(format!(
                "unsupported container `{first}`, expected `{MAGIC} v{VERSION}`"
            )));
        }
        let mut step = 0u64;
        let mut adam_t = 0u64;
        let mut identities = 0usize;
        let mut stats = ChannelStats::identity();
        let mut config = RunConfig::default();
        for line in lines {
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Checkpoint(format!("bad header line `{line}`")));
            };
            match key {
                "step" => step = value.parse().map_err(|_| Error::Checkpoint("bad step".into()))?,
                "adam_t" => {
                    adam_t = value.parse().map_err(|_| Error::Checkpoint("bad adam_t".into()))?
                }
                "identities" => {
                    identities =
                        value.parse().map_err(|_| Error::Checkpoint("bad identities".into()))?
                }
                "stats_mean" => {
                    stats.mean = parse_f32_bits_csv(value, 3)?.try_into().unwrap();
                }
                "stats_std" => {
                    stats.std = parse_f32_bits_csv(value, 3)?.try_into().unwrap();
                }
                _ if key.starts_with("config.") => {
                    config.apply(&key["config.".len()..], value)?;
                }
                other => return Err(Error::Checkpoint(format!("unknown header key `{other}`"))),
            }
        }

        let mut cursor = &bytes[header_end + break_marker.len()..];
        let mut read_exact = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::Checkpoint("truncated tensor section".into()));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        let count = u32::from_le_bytes(read_exact(4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_exact(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(read_exact(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = read_exact(1)?[0];
            if dtype != 0 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let rank = read_exact(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_exact(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = read_exact(4 * n)?;
            let mut values = Vec::with_capacity(n);
            let mut chunks = payload.chunks_exact(4);
            for c in &mut chunks {
                values.push(f32::from_le_bytes(c.try_into().unwrap()));
            }
            tensors.push((name, shape, values));
        }
        Ok(Checkpoint {
            config,
            step,
            adam_t,
            num_identities: identities,
            stats,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelVariant, RunConfig};

    fn tiny_model() -> (Model, RunConfig) {
        let mut config = RunConfig::default();
        for (k, v) in [
            ("dim", "6"),
            ("nq", "3"),
            ("heads", "2"),
            ("layers", "1"),
            ("input_height", "16"),
            ("input_width", "8"),
            ("channels", "4,6,8,10"),
            ("strides", "2,2,1,1"),
            ("ffn_multiplier", "2"),
        ] {
            config.apply(k, v).unwrap();
        }
        assert_eq!(config.model.variant, ModelVariant::Full);
        let model = Model::init(config.model.clone(), 4, ChannelStats::identity(), 11).unwrap();
        (model, config)
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let (mut model, config) = tiny_model();
        // make weights non-trivial
        for i in 0..model.store.len() {
            for (j, v) in model.store.values_mut(i).iter_mut().enumerate() {
                *v += (j as f32 * 0.1).sin() * 1e-3;
            }
        }
        let mut adam = Adam::new(&model.store, &config.train);
        adam.t = 17;
        adam.m[0][0] = 0.125;
        adam.v[0][0] = 3.5e-9;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let saved = Checkpoint::capture(&model, &adam, &config, 42);
        saved.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.adam_t, 17);
        assert_eq!(loaded.num_identities, 4);
        assert_eq!(loaded.config, config);
        let restored = loaded.restore_model().unwrap();
        for i in 0..model.store.len() {
            assert_eq!(
                model.store.values(i),
                restored.store.values(i),
                "param {}",
                model.store.name(i)
            );
        }
        let restored_adam = loaded.restore_adam(&restored.store).unwrap();
        assert_eq!(restored_adam.t, 17);
        assert_eq!(restored_adam.m[0][0], 0.125);
        assert_eq!(restored_adam.v[0][0], 3.5e-9);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOT-A-CHECKPOINT v9\n---\n").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_tensor_is_named_in_the_error() {
        let (model, config) = tiny_model();
        let adam = Adam::new(&model.store, &config.train);
        let mut ck = Checkpoint::capture(&model, &adam, &config, 0);
        ck.tensors.retain(|(n, _, _)| n != "queries");
        let err = ck.restore_model().unwrap_err();
        assert!(err.to_string().contains("queries"), "{err}");
    }
}
