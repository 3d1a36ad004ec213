//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ESCK" | version u32 | descriptor_len u32 | descriptor JSON
//! rng_seed u64
//! param_count u32 | param blob*        (declaration order, base then follow-up)
//! buffer_count u32 | buffer blob*      (normalization running statistics)
//! has_optimizer u8 [momentum f32 | lr f32 | velocity_count u32 | velocity blob*]
//! blob := name_len u32 | name | ndim u32 | dim u64* | f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::arch::{ComposedModel, ModelDescriptor, Network};
use crate::error::{EscError, Result};
use crate::tensor::{OptimizerState, Tensor};

pub const MAGIC: &[u8; 4] = b"ESCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: ModelDescriptor,
    pub rng_seed: u64,
    pub params: Vec<Blob>,
    pub buffers: Vec<Blob>,
    pub optimizer: Option<OptimizerState>,
}

fn network_blobs(prefix: &str, net: &Network, params: &mut Vec<Blob>, buffers: &mut Vec<Blob>) {
    for (name, v) in net.params.names().iter().zip(net.params.values()) {
        params.push(Blob {
            name: format!("{prefix}.{name}"),
            shape: v.shape().to_vec(),
            data: v.data().to_vec(),
        });
    }
    for (name, st) in net.norm_states() {
        let c = st.running_mean.len();
        buffers.push(Blob {
            name: format!("{prefix}.{name}.bn.running_mean"),
            shape: vec![c],
            data: st.running_mean.clone(),
        });
        buffers.push(Blob {
            name: format!("{prefix}.{name}.bn.running_var"),
            shape: vec![c],
            data: st.running_var.clone(),
        });
    }
}

fn load_network<'a>(
    prefix: &str,
    net: &mut Network,
    params: &mut impl Iterator<Item = &'a Blob>,
    buffers: &mut impl Iterator<Item = &'a Blob>,
) -> Result<()> {
    let names = net.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let blob = params
            .next()
            .ok_or_else(|| EscError::Format(format!("missing parameter {prefix}.{name}")))?;
        let expected = format!("{prefix}.{name}");
        let slot = &mut net.params.values_mut()[i];
        if blob.name != expected || blob.shape != slot.shape() {
            return Err(EscError::Format(format!(
                "parameter {} {:?} does not match {expected} {:?}",
                blob.name,
                blob.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::new(blob.shape.clone(), blob.data.clone())?;
    }
    for st in net.norm_states_mut() {
        for target in [&mut st.running_mean, &mut st.running_var] {
            let blob = buffers
                .next()
                .ok_or_else(|| EscError::Format(format!("missing buffer in {prefix}")))?;
            if blob.data.len() != target.len() {
                return Err(EscError::Format(format!("buffer {} has wrong length", blob.name)));
            }
            target.clone_from(&blob.data);
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &ComposedModel, optimizer: Option<&OptimizerState>) -> Self {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        network_blobs("base", &model.base, &mut params, &mut buffers);
        if let Some(fu) = &model.followup {
            network_blobs("followup", fu, &mut params, &mut buffers);
        }
        Self {
            descriptor: model.descriptor.clone(),
            rng_seed: model.descriptor.seed,
            params,
            buffers,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_model(&self) -> Result<ComposedModel> {
        let d = &self.descriptor;
        let mut base = ComposedModel::new_base(&d.base, d.seed)?;
        let mut model = if d.variant.followup().is_some() {
            ComposedModel::compose(&base, d.variant, d.scrambler.clone(), d.seed)?
        } else {
            base.descriptor = d.clone();
            base
        };
        let mut params = self.params.iter();
        let mut buffers = self.buffers.iter();
        load_network("base", &mut model.base, &mut params, &mut buffers)?;
        if let Some(fu) = &mut model.followup {
            load_network("followup", fu, &mut params, &mut buffers)?;
        }
        if params.next().is_some() || buffers.next().is_some() {
            return Err(EscError::Format("checkpoint has trailing blobs".into()));
        }
        model.descriptor = d.clone();
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.descriptor).expect("descriptor serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        write_blobs(&mut out, &self.params);
        write_blobs(&mut out, &self.buffers);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.momentum.to_le_bytes());
                out.extend_from_slice(&opt.learning_rate.to_le_bytes());
                let blobs: Vec<Blob> = opt
                    .velocity
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Blob {
                        name: format!("velocity.{i}"),
                        shape: vec![v.len()],
                        data: v.clone(),
                    })
                    .collect();
                write_blobs(&mut out, &blobs);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(EscError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(EscError::Format(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let descriptor: ModelDescriptor = serde_json::from_slice(r.take(len)?)?;
        let rng_seed = r.u64()?;
        let params = r.blobs()?;
        let buffers = r.blobs()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let momentum = f32::from_le_bytes(r.take(4)?.try_into().expect("4"));
                let learning_rate = f32::from_le_bytes(r.take(4)?.try_into().expect("4"));
                let velocity = r.blobs()?.into_iter().map(|b| b.data).collect();
                Some(OptimizerState {
                    momentum,
                    learning_rate,
                    velocity,
                })
            }
            t => return Err(EscError::Format(format!("bad optimizer tag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(EscError::Format("trailing bytes".into()));
        }
        Ok(Self {
            descriptor,
            rng_seed,
            params,
            buffers,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_blobs(out: &mut Vec<u8>, blobs: &[Blob]) {
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for d in &b.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| EscError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn blobs(&mut self) -> Result<Vec<Blob>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| EscError::Format("blob name is not UTF-8".into()))?;
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(4).ok_or_else(|| EscError::Format("blob too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                .collect();
            out.push(Blob { name, shape, data });
        }
        Ok(out)
    }
}
