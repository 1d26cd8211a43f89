//! Model file format: little-endian, magic "SGN1", u16 version, a
//! length-prefixed canonical JSON config block, a CRC32 over config and
//! payload, then the float32 parameter payload in declared order (per block:
//! filters, bias, gamma, beta, running mean, running var; then the classifier
//! weights and bias; then the attention projections).

use std::path::Path;

use crate::render::write_atomic;
use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

use super::{SgnConfig, SgnModel};

pub const MODEL_MAGIC: &[u8; 4] = b"SGN1";
pub const MODEL_VERSION: u16 = 1;

const CRC_TABLE: [u32; 256] = build_crc_table();

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// All tensors in serialization order: trainable parameters plus BN running
/// statistics (needed to reproduce eval-mode forwards bitwise).
fn serialized_tensors<F: Real>(model: &SgnModel<F>) -> Vec<&Tensor<F>> {
    let mut ts = Vec::new();
    for b in &model.blocks {
        ts.extend([
            &b.filters,
            &b.bias,
            &b.gamma,
            &b.beta,
            &b.running_mean,
            &b.running_var,
        ]);
    }
    ts.extend([&model.fc_w, &model.fc_b]);
    if let Some(m) = &model.mha {
        ts.extend([&m.w_q, &m.w_k, &m.w_v, &m.w_o]);
    }
    ts
}

pub fn save_model<F: Real>(model: &SgnModel<F>, path: &Path) -> Result<()> {
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| SgnError::Format(format!("config serialization: {e}")))?;
    let mut payload = Vec::new();
    for t in serialized_tensors(model) {
        for v in t.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let mut crc_input = config.clone();
    crc_input.extend_from_slice(&payload);

    let mut bytes = Vec::with_capacity(14 + config.len() + payload.len());
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&config);
    bytes.extend_from_slice(&crc32(&crc_input).to_le_bytes());
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<SgnModel<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 14 {
        return Err(SgnError::Format("model file truncated before header".into()));
    }
    if &bytes[0..4] != MODEL_MAGIC {
        return Err(SgnError::Format(format!(
            "bad model magic: expected {:?}, got {:?}",
            MODEL_MAGIC,
            &bytes[0..4]
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(SgnError::Format(format!(
            "unsupported model version {version} (this build reads {MODEL_VERSION})"
        )));
    }
    let config_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + config_len + 4 {
        return Err(SgnError::Format("model file truncated inside config block".into()));
    }
    let config_bytes = &bytes[10..10 + config_len];
    let crc_stored = u32::from_le_bytes([
        bytes[10 + config_len],
        bytes[11 + config_len],
        bytes[12 + config_len],
        bytes[13 + config_len],
    ]);
    let payload = &bytes[14 + config_len..];

    let mut crc_input = config_bytes.to_vec();
    crc_input.extend_from_slice(payload);
    let crc_actual = crc32(&crc_input);
    if crc_actual != crc_stored {
        return Err(SgnError::Format(format!(
            "model checksum mismatch: stored {crc_stored:#010x}, computed {crc_actual:#010x}"
        )));
    }

    let config: SgnConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| SgnError::Format(format!("config block: {e}")))?;
    let mut model = SgnModel::<f32>::new(config)?;
    let expected: usize = serialized_tensors(&model).iter().map(|t| t.len()).sum();
    if payload.len() != expected * 4 {
        return Err(SgnError::Format(format!(
            "model payload length {} != expected {} floats",
            payload.len() / 4,
            expected
        )));
    }
    let mut cursor = 0usize;
    let mut fill = |t: &mut Tensor<f32>| {
        for v in t.data_mut() {
            *v = f32::from_le_bytes([
                payload[cursor],
                payload[cursor + 1],
                payload[cursor + 2],
                payload[cursor + 3],
            ]);
            cursor += 4;
        }
    };
    for b in &mut model.blocks {
        fill(&mut b.filters);
        fill(&mut b.bias);
        fill(&mut b.gamma);
        fill(&mut b.beta);
        fill(&mut b.running_mean);
        fill(&mut b.running_var);
    }
    fill(&mut model.fc_w);
    fill(&mut model.fc_b);
    if let Some(m) = &mut model.mha {
        fill(&mut m.w_q);
        fill(&mut m.w_k);
        fill(&mut m.w_v);
        fill(&mut m.w_o);
    }
    Ok(model)
}
