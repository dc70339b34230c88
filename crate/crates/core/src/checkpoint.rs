//! Checkpoint and latent-file persistence.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic   "IDSE" (4 bytes)
//! version u32 (currently 1)
//! config  u64 byte length + canonical key=value text (UTF-8)
//! records u64 count, then per record:
//!         name  u32 byte length + UTF-8 bytes
//!         rank  u32
//!         dims  u64 per rank
//!         data  f64 per element
//! ```
//!
//! Record order is fixed, and the embedded config text is regenerated in
//! canonical form on every save, so save -> load -> save is byte-identical.
//!
//! Latent files are a single record named "latent" with rank 2 and no
//! header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::loss::LossReport;
use crate::model::{EditorParams, IntensityNetWeights, LatentCode, PARAM_NAMES};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::world::SyntheticWorld;

const MAGIC: &[u8; 4] = b"IDSE";
const VERSION: u32 = 1;

const WORLD_RECORDS: [&str; 6] = [
    "world.mixing",
    "world.heads",
    "world.head_bias",
    "world.id_proj",
    "world.planted",
    "world.layer_weights",
];

const METRIC_RECORDS: [&str; 6] = [
    "metrics.class",
    "metrics.neighborhood",
    "metrics.sparsity",
    "metrics.direction",
    "metrics.identity",
    "metrics.total",
];

/// A trained (or freshly initialized) editor together with everything needed
/// to reproduce its evaluation: configuration, the frozen world, parameters,
/// optional optimizer state, and the final loss report.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub world: SyntheticWorld,
    pub params: EditorParams,
    pub optimizer: Option<OptimizerState>,
    pub metrics: Option<LossReport>,
}

// ── Low-level record encoding ───────────────────────────────────────────

struct Sink<W: Write> {
    inner: W,
    path: String,
}

impl<W: Write> Sink<W> {
    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.write(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.write(&v.to_le_bytes())
    }

    fn record(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        self.u32(name.len() as u32)?;
        self.write(name.as_bytes())?;
        self.u32(2)?;
        self.u64(tensor.rows() as u64)?;
        self.u64(tensor.cols() as u64)?;
        for &v in tensor.data() {
            self.write(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Source<R: Read> {
    inner: R,
    path: String,
}

impl<R: Read> Source<R> {
    /// Read exactly `n` bytes; a short read is a truncation of `context`.
    fn bytes(&mut self, n: usize, context: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            let got = self
                .inner
                .read(&mut buf[filled..])
                .map_err(|e| Error::io(&self.path, e))?;
            if got == 0 {
                return Err(Error::CorruptRecord {
                    name: context.to_string(),
                });
            }
            filled += got;
        }
        Ok(buf)
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.bytes(4, context)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &str) -> Result<u64> {
        let b = self.bytes(8, context)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32("<record header>")? as usize;
        if name_len > 4096 {
            return Err(Error::CorruptRecord {
                name: "<record header>".to_string(),
            });
        }
        let name = String::from_utf8(self.bytes(name_len, "<record name>")?)
            .map_err(|_| Error::CorruptRecord {
                name: "<record name>".to_string(),
            })?;
        let rank = self.u32(&name)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::CorruptRecord { name });
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = self.u64(&name)?;
            count = count.saturating_mul(d.max(1));
            dims.push(d as usize);
        }
        if count > (1 << 32) {
            return Err(Error::CorruptRecord { name });
        }
        let mut data = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let b = self.bytes(8, &name)?;
            data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        Ok((name, dims, data))
    }
}

fn record_to_matrix(name: &str, dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
    if dims.len() != 2 {
        return Err(Error::invalid(
            "record",
            format!("record '{name}' has rank {}, expected 2", dims.len()),
        ));
    }
    Tensor::from_vec(dims[0], dims[1], data)
        .map_err(|_| Error::CorruptRecord {
            name: name.to_string(),
        })
}

// ── Checkpoint save / load ──────────────────────────────────────────────

impl Checkpoint {
    fn record_plan(&self) -> Vec<(String, &Tensor)> {
        let mut plan: Vec<(String, &Tensor)> = vec![
            (WORLD_RECORDS[0].into(), &self.world.mixing),
            (WORLD_RECORDS[1].into(), &self.world.heads),
            (WORLD_RECORDS[2].into(), &self.world.head_bias),
            (WORLD_RECORDS[3].into(), &self.world.id_proj),
            (WORLD_RECORDS[4].into(), &self.world.planted),
            (WORLD_RECORDS[5].into(), &self.world.layer_weights),
        ];
        for (name, tensor) in self.params.tensors() {
            plan.push((format!("editor.{name}"), tensor));
        }
        plan
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut sink = Sink {
        inner: BufWriter::new(file),
        path: display,
    };

    sink.write(MAGIC)?;
    sink.u32(VERSION)?;
    let config_text = ckpt.config.to_text();
    sink.u64(config_text.len() as u64)?;
    sink.write(config_text.as_bytes())?;

    let plan = ckpt.record_plan();
    let optim_records = match &ckpt.optimizer {
        Some(_) => 1 + 2 * PARAM_NAMES.len(),
        None => 0,
    };
    let metric_records = if ckpt.metrics.is_some() {
        METRIC_RECORDS.len()
    } else {
        0
    };
    sink.u64((plan.len() + optim_records + metric_records) as u64)?;

    for (name, tensor) in &plan {
        sink.record(name, tensor)?;
    }
    if let Some(state) = &ckpt.optimizer {
        sink.record("optim.step", &Tensor::scalar(state.step as f64))?;
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            sink.record(&format!("optim.m.{name}"), &state.first_moment[i])?;
        }
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            sink.record(&format!("optim.s.{name}"), &state.belief[i])?;
        }
    }
    if let Some(metrics) = &ckpt.metrics {
        let values = [
            metrics.class,
            metrics.neighborhood,
            metrics.sparsity,
            metrics.direction,
            metrics.identity,
            metrics.total,
        ];
        for (name, value) in METRIC_RECORDS.iter().zip(values) {
            sink.record(name, &Tensor::scalar(value))?;
        }
    }
    sink.inner.flush().map_err(|e| Error::io(&sink.path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut src = Source {
        inner: BufReader::new(file),
        path: display,
    };

    let magic = src.bytes(4, "<magic>").map_err(|_| Error::NotACheckpoint)?;
    if magic != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let version = src.u32("<version>")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config_len = src.u64("<config>")? as usize;
    if config_len > (1 << 20) {
        return Err(Error::CorruptRecord {
            name: "<config>".to_string(),
        });
    }
    let config_text = String::from_utf8(src.bytes(config_len, "<config>")?)
        .map_err(|_| Error::CorruptRecord {
            name: "<config>".to_string(),
        })?;
    let config = TrainConfig::from_text(&config_text)?;

    let count = src.u64("<record count>")? as usize;
    let mut records: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, dims, data) = src.record()?;
        let tensor = record_to_matrix(&name, &dims, data)?;
        records.push((name, tensor));
    }

    let take = |name: &str| -> Result<Tensor> {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::MissingRecord {
                name: name.to_string(),
            })
    };

    let expect_shape = |name: &str, tensor: &Tensor, shape: (usize, usize)| -> Result<()> {
        if tensor.shape() != shape {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "record '{name}' has shape {}, expected {}x{}",
                    tensor.dims(),
                    shape.0,
                    shape.1
                ),
            ));
        }
        Ok(())
    };

    let d = config.dims;
    let world = SyntheticWorld {
        mixing: take(WORLD_RECORDS[0])?,
        heads: take(WORLD_RECORDS[1])?,
        head_bias: take(WORLD_RECORDS[2])?,
        id_proj: take(WORLD_RECORDS[3])?,
        planted: take(WORLD_RECORDS[4])?,
        layer_weights: take(WORLD_RECORDS[5])?,
    };
    expect_shape(WORLD_RECORDS[0], &world.mixing, (config.image_dim, d.dim))?;
    expect_shape(WORLD_RECORDS[1], &world.heads, (d.attrs, config.image_dim))?;
    expect_shape(WORLD_RECORDS[2], &world.head_bias, (d.attrs, 1))?;
    expect_shape(
        WORLD_RECORDS[3],
        &world.id_proj,
        (config.identity_dim, config.image_dim),
    )?;
    expect_shape(WORLD_RECORDS[4], &world.planted, (d.attrs, d.dim))?;
    expect_shape(WORLD_RECORDS[5], &world.layer_weights, (1, d.layers))?;

    let params = EditorParams {
        directions: take("editor.directions")?,
        layer_embed: take("editor.layer_embed")?,
        net: IntensityNetWeights {
            w1: take("editor.net.w1")?,
            b1: take("editor.net.b1")?,
            wc: take("editor.net.wc")?,
            bc: take("editor.net.bc")?,
            w2: take("editor.net.w2")?,
            b2: take("editor.net.b2")?,
        },
    };
    expect_shape("editor.directions", &params.directions, (d.attrs, d.dim))?;
    expect_shape("editor.layer_embed", &params.layer_embed, (d.attrs, d.layers))?;
    expect_shape("editor.net.w1", &params.net.w1, (2 * d.dim, d.dim))?;
    expect_shape("editor.net.b1", &params.net.b1, (1, d.dim))?;
    expect_shape("editor.net.wc", &params.net.wc, (d.layers, d.layers))?;
    expect_shape("editor.net.bc", &params.net.bc, (1, d.layers))?;
    expect_shape("editor.net.w2", &params.net.w2, (d.dim, d.dim))?;
    expect_shape("editor.net.b2", &params.net.b2, (1, d.dim))?;

    let optimizer = if records.iter().any(|(n, _)| n == "optim.step") {
        let step = take("optim.step")?.scalar_value()? as u64;
        let mut first_moment = Vec::with_capacity(PARAM_NAMES.len());
        let mut belief = Vec::with_capacity(PARAM_NAMES.len());
        for name in PARAM_NAMES {
            first_moment.push(take(&format!("optim.m.{name}"))?);
        }
        for name in PARAM_NAMES {
            belief.push(take(&format!("optim.s.{name}"))?);
        }
        Some(OptimizerState {
            first_moment,
            belief,
            step,
        })
    } else {
        None
    };

    let metrics = if records.iter().any(|(n, _)| n == METRIC_RECORDS[0]) {
        let mut values = [0.0; 6];
        for (slot, name) in values.iter_mut().zip(METRIC_RECORDS) {
            *slot = take(name)?.scalar_value()?;
        }
        Some(LossReport {
            class: values[0],
            neighborhood: values[1],
            sparsity: values[2],
            direction: values[3],
            identity: values[4],
            total: values[5],
        })
    } else {
        None
    };

    Ok(Checkpoint {
        config,
        world,
        params,
        optimizer,
        metrics,
    })
}

// ── Latent files ────────────────────────────────────────────────────────

pub fn write_latent(path: impl AsRef<Path>, latent: &LatentCode) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut sink = Sink {
        inner: BufWriter::new(file),
        path: display,
    };
    sink.record("latent", latent.matrix())?;
    sink.inner.flush().map_err(|e| Error::io(&sink.path, e))?;
    Ok(())
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentCode> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut src = Source {
        inner: BufReader::new(file),
        path: display,
    };
    let (name, dims, data) = src.record()?;
    if name != "latent" {
        return Err(Error::invalid(
            "latent",
            format!("expected record 'latent', found '{name}'"),
        ));
    }
    LatentCode::new(record_to_matrix(&name, &dims, data)?)
}
