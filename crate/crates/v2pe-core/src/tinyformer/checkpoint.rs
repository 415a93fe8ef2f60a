//! Versioned model checkpoints: JSON header + raw little-endian f32 blob.
//!
//! Layout: 8-byte magic, u32 header length, header JSON (config + block
//! index), then each parameter block's data in the fixed `blocks()` order.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::TinyModel;
use super::{ModelError, TinyModelConfig};

const MAGIC: &[u8; 8] = b"V2PETFM1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TinyModelConfig,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    len: usize,
}

impl TinyModel<f32> {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = BufWriter::new(File::create(path)?);
        let blocks = self.blocks();
        let header = Header {
            config: *self.config(),
            blocks: blocks
                .iter()
                .map(|(name, data)| BlockEntry {
                    name: name.clone(),
                    len: data.len(),
                })
                .collect(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&(header_json.len() as u32).to_le_bytes())?;
        out.write_all(&header_json)?;
        for (_, data) in &blocks {
            for &x in *data {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut len_bytes = [0u8; 4];
        input.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        input.read_exact(&mut header_json)?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;

        let mut model = TinyModel::<f32>::zeroed(header.config)?;
        {
            let mut blocks = model.blocks_mut();
            if blocks.len() != header.blocks.len() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {} blocks, header lists {}",
                    blocks.len(),
                    header.blocks.len()
                )));
            }
            let mut buf = Vec::new();
            for ((name, data), entry) in blocks.iter_mut().zip(&header.blocks) {
                if *name != entry.name || data.len() != entry.len {
                    return Err(ModelError::Checkpoint(format!(
                        "block mismatch: model has {name}[{}], file has {}[{}]",
                        data.len(),
                        entry.name,
                        entry.len
                    )));
                }
                buf.resize(entry.len * 4, 0);
                input.read_exact(&mut buf)?;
                for (i, x) in data.iter_mut().enumerate() {
                    *x = f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap());
                }
            }
        }
        Ok(model)
    }
}
