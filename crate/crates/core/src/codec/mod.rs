//! `.gs4d` chunk stream: a full base model in chunk 0 followed by rank-λ
//! plane-channel factors for every later chunk. The byte layout is described
//! in `docs/format.md`.

mod bytes;

use half::f16;
use nalgebra::{DMatrix, Vector3, Vector4};
use serde::Serialize;
use thiserror::Error;

use crate::deform::{Aabb, DeformDecoder, DeformField, PlaneAxis, TriPlane};
use crate::gaussian::GaussianPrimitive;
use crate::lowrank::{compose_adaptation, FactorTarget, LowRankFactor};
use crate::model::{ModelConfig, SceneModel};
use crate::sh;
use bytes::{Reader, Writer};

pub const MAGIC: [u8; 4] = *b"GS4D";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 32;
pub const BASE_CONFIG_BYTES: usize = 50;
pub const DELTA_RECORD_BYTES: usize = 13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("payload checksum mismatch: header says {expected:#010x}, payload hashes to {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("chunk {missing} is missing from the stream")]
    Gap { missing: u32 },
    #[error("value {0} is not representable at half precision")]
    Range(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Base = 0,
    Delta = 1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32 = 0,
    F16 = 1,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }

    /// Rounds `v` the way the encoder stores it.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F16 => f16_nearest(v).to_f64(),
        }
    }
}

/// Round-to-nearest-even f64 -> f16. `f16::from_f64` can go through f32 on
/// hardware with F16C and round twice; rounding to odd at f32 first makes the
/// second rounding exact.
pub fn f16_nearest(v: f64) -> f16 {
    let y = v as f32;
    if !y.is_finite() || y as f64 == v {
        return f16::from_f32(y);
    }
    let mut bits = y.to_bits();
    if (y as f64).abs() > v.abs() {
        bits -= 1;
    }
    f16::from_f32(f32::from_bits(bits | 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkHeader {
    pub version: u16,
    pub payload_kind: PayloadKind,
    pub precision: Precision,
    pub chunk_index: u32,
    pub frame_start: u32,
    pub frame_count: u32,
    pub payload_bytes: u64,
    pub checksum: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChunkPayload {
    Base(SceneModel),
    Delta(Vec<LowRankFactor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub header: ChunkHeader,
    pub payload: ChunkPayload,
}

impl Chunk {
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.header.payload_bytes as usize
    }
}

fn check_frames(frame_count: u32) -> Result<(), CodecError> {
    if frame_count == 0 {
        return Err(CodecError::Protocol("frame_count must be >= 1".into()));
    }
    Ok(())
}

fn frame(kind: PayloadKind, precision: Precision, chunk_index: u32, frame_start: u32, frame_count: u32, payload: Vec<u8>) -> Vec<u8> {
    let mut w = Writer::with_capacity(HEADER_BYTES + payload.len());
    w.bytes(&MAGIC);
    w.u16(VERSION);
    w.u8(kind as u8);
    w.u8(precision as u8);
    w.u32(chunk_index);
    w.u32(frame_start);
    w.u32(frame_count);
    w.u64(payload.len() as u64);
    w.u32(crc32fast::hash(&payload));
    w.bytes(&payload);
    w.finish()
}

/// Payload size in bytes of a base chunk.
pub fn base_payload_size(config: &ModelConfig, gaussian_count: usize) -> usize {
    let per_gaussian = 3 + 4 + 3 + 1 + 3 * config.sh_count() + config.embedding_dim;
    let planes = 3 * config.plane_features * config.plane_resolution * config.plane_resolution;
    let (h, i) = (config.hidden_width, config.decoder_input_width());
    let decoder = h * i + h + h * h + h + 14 * h + 14;
    BASE_CONFIG_BYTES + 4 * (gaussian_count * per_gaussian + planes + decoder)
}

/// Payload size in bytes of a delta chunk.
pub fn delta_payload_size(factors: &[LowRankFactor], precision: Precision) -> usize {
    factors
        .iter()
        .map(|f| DELTA_RECORD_BYTES + precision.bytes() * f.rank() * (f.u.nrows() + f.v.nrows()))
        .sum()
}

/// Serializes chunk 0. Parameters are stored as f32.
pub fn encode_base_chunk(model: &SceneModel, frame_start: u32, frame_count: u32) -> Result<Vec<u8>, CodecError> {
    check_frames(frame_count)?;
    model
        .validate()
        .map_err(|e| CodecError::Protocol(format!("model is inconsistent: {e}")))?;
    let c = &model.config;
    let n = model.gaussians.len();
    let mut w = Writer::with_capacity(base_payload_size(c, n));
    w.u8(c.sh_degree as u8);
    w.u8(c.time_freqs as u8);
    w.u32(c.embedding_dim as u32);
    w.u32(c.plane_resolution as u32);
    w.u32(c.plane_features as u32);
    w.u32(c.hidden_width as u32);
    w.u32(c.rank as u32);
    for v in c.bounds.min.iter().chain(c.bounds.max.iter()) {
        w.f32(*v);
    }
    w.u32(n as u32);
    let gs = &model.gaussians;
    gs.iter().flat_map(|g| g.center.iter()).for_each(|v| w.f32(*v));
    gs.iter().flat_map(|g| g.rotation.iter()).for_each(|v| w.f32(*v));
    gs.iter().flat_map(|g| g.log_scale.iter()).for_each(|v| w.f32(*v));
    gs.iter().for_each(|g| w.f32(g.opacity_logit));
    gs.iter().flat_map(|g| g.sh_coeffs.iter().flatten()).for_each(|v| w.f32(*v));
    gs.iter().flat_map(|g| g.embedding.iter()).for_each(|v| w.f32(*v));
    for m in &model.field.triplane.channels {
        for r in 0..m.nrows() {
            m.row(r).iter().for_each(|v| w.f32(*v));
        }
    }
    model.field.decoder.flatten().iter().for_each(|v| w.f32(*v));
    Ok(frame(PayloadKind::Base, Precision::F32, 0, frame_start, frame_count, w.finish()))
}

/// Serializes the factors of chunk `chunk_index` (≥ 1).
pub fn encode_delta_chunk(
    factors: &[LowRankFactor],
    chunk_index: u32,
    frame_start: u32,
    frame_count: u32,
    precision: Precision,
) -> Result<Vec<u8>, CodecError> {
    if chunk_index == 0 {
        return Err(CodecError::Protocol("chunk 0 must carry the base model".into()));
    }
    check_frames(frame_count)?;
    let mut w = Writer::with_capacity(delta_payload_size(factors, precision));
    for f in factors {
        let (m, n, rank) = (f.u.nrows(), f.v.nrows(), f.rank());
        if f.v.ncols() != rank || rank == 0 || rank > u16::MAX as usize || f.target.channel > u16::MAX as usize {
            return Err(CodecError::Protocol("factor rank or channel out of range".into()));
        }
        w.u8(f.target.plane as u8);
        w.u16(f.target.channel as u16);
        w.u16(rank as u16);
        w.u32(m as u32);
        w.u32(n as u32);
        for mat in [&f.u, &f.v] {
            for r in 0..mat.nrows() {
                for v in mat.row(r).iter() {
                    match precision {
                        Precision::F32 => w.f32(*v),
                        Precision::F16 => {
                            let h = f16_nearest(*v);
                            if v.is_finite() && !h.is_finite() {
                                return Err(CodecError::Range(*v));
                            }
                            w.u16(h.to_bits());
                        }
                    }
                }
            }
        }
    }
    Ok(frame(PayloadKind::Delta, precision, chunk_index, frame_start, frame_count, w.finish()))
}

/// Parses and validates the header at the start of `data`.
pub fn decode_header(data: &[u8]) -> Result<ChunkHeader, CodecError> {
    let mut r = Reader::new(data);
    let magic: [u8; 4] = r.bytes(4)?.try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let kind = r.u8()?;
    let precision = r.u8()?;
    let chunk_index = r.u32()?;
    let frame_start = r.u32()?;
    let frame_count = r.u32()?;
    let payload_bytes = r.u64()?;
    let checksum = r.u32()?;
    let payload_kind = match kind {
        0 => PayloadKind::Base,
        1 => PayloadKind::Delta,
        k => return Err(CodecError::Protocol(format!("unknown payload kind {k}"))),
    };
    let precision = match precision {
        0 => Precision::F32,
        1 => Precision::F16,
        p => return Err(CodecError::Protocol(format!("unknown precision {p}"))),
    };
    check_frames(frame_count)?;
    if (chunk_index == 0) != (payload_kind == PayloadKind::Base) {
        return Err(CodecError::Protocol(format!(
            "chunk {chunk_index} has payload kind {payload_kind:?}; only chunk 0 is a base chunk"
        )));
    }
    if payload_kind == PayloadKind::Base && precision != Precision::F32 {
        return Err(CodecError::Protocol("base chunks are always f32".into()));
    }
    Ok(ChunkHeader {
        version,
        payload_kind,
        precision,
        chunk_index,
        frame_start,
        frame_count,
        payload_bytes,
        checksum,
    })
}

/// Decodes one chunk from the start of `data`; trailing bytes are ignored.
pub fn decode_chunk(data: &[u8]) -> Result<Chunk, CodecError> {
    let header = decode_header(data)?;
    let total = usize::try_from(header.payload_bytes)
        .ok()
        .and_then(|p| p.checked_add(HEADER_BYTES))
        .ok_or(CodecError::Truncated {
            needed: usize::MAX,
            available: data.len(),
        })?;
    if data.len() < total {
        return Err(CodecError::Truncated {
            needed: total,
            available: data.len(),
        });
    }
    let payload = &data[HEADER_BYTES..total];
    let actual = crc32fast::hash(payload);
    if actual != header.checksum {
        return Err(CodecError::ChecksumMismatch {
            expected: header.checksum,
            actual,
        });
    }
    let payload = match header.payload_kind {
        PayloadKind::Base => ChunkPayload::Base(decode_base(payload)?),
        PayloadKind::Delta => ChunkPayload::Delta(decode_delta(payload, header.precision, header.chunk_index)?),
    };
    Ok(Chunk { header, payload })
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

fn decode_base(payload: &[u8]) -> Result<SceneModel, CodecError> {
    let mut r = Reader::new(payload);
    let sh_degree = r.u8()? as usize;
    let time_freqs = r.u8()? as usize;
    let embedding_dim = r.u32()? as usize;
    let plane_resolution = r.u32()? as usize;
    let plane_features = r.u32()? as usize;
    let hidden_width = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f32()?;
    }
    let bounds = Aabb::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]))
        .map_err(|e| malformed(e.to_string()))?;
    let config = ModelConfig {
        sh_degree,
        embedding_dim,
        plane_resolution,
        plane_features,
        time_freqs,
        hidden_width,
        rank,
        bounds,
    };
    config.validate().map_err(|e| malformed(e.to_string()))?;
    let n = r.u32()? as usize;
    let expected = base_payload_size(&config, n);
    if payload.len() != expected {
        return Err(malformed(format!(
            "base payload is {} bytes but its config implies {expected}",
            payload.len()
        )));
    }
    let sh_count = sh::coeff_count(sh_degree);
    let centers = r.f32_vec(3 * n)?;
    let rotations = r.f32_vec(4 * n)?;
    let scales = r.f32_vec(3 * n)?;
    let opacities = r.f32_vec(n)?;
    let shs = r.f32_vec(3 * sh_count * n)?;
    let embeddings = r.f32_vec(embedding_dim * n)?;
    let gaussians = (0..n)
        .map(|i| GaussianPrimitive {
            center: Vector3::from_column_slice(&centers[3 * i..3 * i + 3]),
            rotation: Vector4::from_column_slice(&rotations[4 * i..4 * i + 4]),
            log_scale: Vector3::from_column_slice(&scales[3 * i..3 * i + 3]),
            opacity_logit: opacities[i],
            sh_coeffs: shs[3 * sh_count * i..3 * sh_count * (i + 1)]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            embedding: embeddings[embedding_dim * i..embedding_dim * (i + 1)].to_vec(),
        })
        .collect();
    let mut triplane =
        TriPlane::zeros(plane_resolution, plane_features, bounds).map_err(|e| malformed(e.to_string()))?;
    for m in &mut triplane.channels {
        let vals = r.f32_vec(plane_resolution * plane_resolution)?;
        *m = DMatrix::from_row_slice(plane_resolution, plane_resolution, &vals);
    }
    let mut decoder = DeformDecoder::zeros(config.decoder_input_width(), hidden_width);
    let flat = r.f32_vec(decoder.parameter_count())?;
    decoder.unflatten_into(&flat);
    Ok(SceneModel {
        config,
        gaussians,
        field: DeformField {
            triplane,
            decoder,
            time_freqs,
        },
    })
}

fn decode_delta(payload: &[u8], precision: Precision, chunk_index: u32) -> Result<Vec<LowRankFactor>, CodecError> {
    let mut r = Reader::new(payload);
    let mut factors = Vec::new();
    while r.remaining() > 0 {
        let plane = PlaneAxis::from_index(r.u8()? as usize).ok_or_else(|| malformed("plane id out of range"))?;
        let channel = r.u16()? as usize;
        let rank = r.u16()? as usize;
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        if rank == 0 || rank > m.min(n) {
            return Err(malformed(format!("rank {rank} invalid for a {m}x{n} factor")));
        }
        let needed = precision.bytes() * rank * (m + n);
        if r.remaining() < needed {
            return Err(malformed("factor record runs past the payload"));
        }
        let mut read = |rows: usize| -> Result<DMatrix<f64>, CodecError> {
            let vals = match precision {
                Precision::F32 => r.f32_vec(rows * rank)?,
                Precision::F16 => r.f16_vec(rows * rank)?,
            };
            Ok(DMatrix::from_row_slice(rows, rank, &vals))
        };
        let u = read(m)?;
        let v = read(n)?;
        factors.push(LowRankFactor {
            u,
            v,
            target: FactorTarget::new(plane, channel),
            chunk_index,
        });
    }
    Ok(factors)
}

/// Splits a concatenated stream into chunks.
pub fn parse_stream(data: &[u8]) -> Result<Vec<Chunk>, CodecError> {
    let mut chunks = Vec::new();
    let mut offset = 0;
    while offset < data.len() {
        let chunk = decode_chunk(&data[offset..])?;
        offset += chunk.encoded_len();
        chunks.push(chunk);
    }
    Ok(chunks)
}

/// Adds every factor to its target plane channel.
pub fn apply_delta(model: &mut SceneModel, factors: &[LowRankFactor]) -> Result<(), CodecError> {
    let features = model.field.triplane.features;
    for f in factors {
        if f.target.channel >= features {
            return Err(CodecError::Protocol(format!(
                "factor targets channel {} but planes have {features}",
                f.target.channel
            )));
        }
        let idx = f.target.flat_index(features);
        let ch = &model.field.triplane.channels[idx];
        model.field.triplane.channels[idx] =
            compose_adaptation(ch, f).map_err(|e| CodecError::Protocol(e.to_string()))?;
    }
    Ok(())
}

/// State after chunks `0..=k` of a parsed stream.
pub fn reconstruct_from_chunks(chunks: &[Chunk], k: u32) -> Result<SceneModel, CodecError> {
    let find = |idx: u32| -> Result<&Chunk, CodecError> {
        let mut hits = chunks.iter().filter(|c| c.header.chunk_index == idx);
        let first = hits.next().ok_or(CodecError::Gap { missing: idx })?;
        if hits.next().is_some() {
            return Err(CodecError::Protocol(format!("chunk {idx} appears more than once")));
        }
        Ok(first)
    };
    let mut model = match &find(0)?.payload {
        ChunkPayload::Base(m) => m.clone(),
        ChunkPayload::Delta(_) => unreachable!("header validation ties chunk 0 to a base payload"),
    };
    for idx in 1..=k {
        match &find(idx)?.payload {
            ChunkPayload::Delta(f) => apply_delta(&mut model, f)?,
            ChunkPayload::Base(_) => unreachable!("header validation ties base payloads to chunk 0"),
        }
    }
    Ok(model)
}

/// State after chunks `0..=k` of an encoded stream.
pub fn reconstruct_state(stream: &[u8], k: u32) -> Result<SceneModel, CodecError> {
    reconstruct_from_chunks(&parse_stream(stream)?, k)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChunkBytes {
    pub chunk_index: u32,
    pub kind: PayloadKind,
    pub precision: Precision,
    pub frame_start: u32,
    pub frame_count: u32,
    /// Header plus payload.
    pub bytes: u64,
    pub bytes_per_frame: f64,
    /// Raw factor values only, without headers or record fields.
    pub factor_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub chunks: Vec<ChunkBytes>,
    pub total_bytes: u64,
    pub total_frames: u64,
    pub bytes_per_frame: f64,
    pub base_bytes: u64,
    pub delta_total_bytes: u64,
    pub delta_chunk_count: usize,
    pub mean_delta_bytes: Option<f64>,
    /// Bytes to resend every plane channel as f32, per chunk.
    pub full_plane_bytes: Option<u64>,
    /// Mean delta chunk bytes over `full_plane_bytes`.
    pub delta_to_full_ratio: Option<f64>,
    /// Same ratio counting factor values only.
    pub factor_to_full_ratio: Option<f64>,
    pub reduction_ratio: Option<f64>,
}

pub fn bandwidth_from_chunks(chunks: &[Chunk]) -> BandwidthReport {
    let mut rows = Vec::with_capacity(chunks.len());
    let mut full_plane_bytes = None;
    for c in chunks {
        let h = &c.header;
        let factor_bytes = match &c.payload {
            ChunkPayload::Base(m) => {
                let cfg = &m.config;
                full_plane_bytes = Some((4 * 3 * cfg.plane_features * cfg.plane_resolution * cfg.plane_resolution) as u64);
                0
            }
            ChunkPayload::Delta(f) => {
                (delta_payload_size(f, h.precision) - DELTA_RECORD_BYTES * f.len()) as u64
            }
        };
        let bytes = c.encoded_len() as u64;
        rows.push(ChunkBytes {
            chunk_index: h.chunk_index,
            kind: h.payload_kind,
            precision: h.precision,
            frame_start: h.frame_start,
            frame_count: h.frame_count,
            bytes,
            bytes_per_frame: bytes as f64 / h.frame_count as f64,
            factor_bytes,
        });
    }
    let total_bytes: u64 = rows.iter().map(|r| r.bytes).sum();
    let total_frames: u64 = rows.iter().map(|r| r.frame_count as u64).sum();
    let base_bytes = rows.iter().filter(|r| r.kind == PayloadKind::Base).map(|r| r.bytes).sum();
    let deltas: Vec<&ChunkBytes> = rows.iter().filter(|r| r.kind == PayloadKind::Delta).collect();
    let delta_total_bytes: u64 = deltas.iter().map(|r| r.bytes).sum();
    let mean = |f: fn(&ChunkBytes) -> u64| -> Option<f64> {
        (!deltas.is_empty()).then(|| deltas.iter().map(|r| f(r) as f64).sum::<f64>() / deltas.len() as f64)
    };
    let mean_delta_bytes = mean(|r| r.bytes);
    let mean_factor_bytes = mean(|r| r.factor_bytes);
    let ratio = |m: Option<f64>| match (m, full_plane_bytes) {
        (Some(m), Some(full)) if full > 0 => Some(m / full as f64),
        _ => None,
    };
    let delta_to_full_ratio = ratio(mean_delta_bytes);
    BandwidthReport {
        total_bytes,
        total_frames,
        bytes_per_frame: if total_frames > 0 { total_bytes as f64 / total_frames as f64 } else { 0.0 },
        base_bytes,
        delta_total_bytes,
        delta_chunk_count: deltas.len(),
        mean_delta_bytes,
        full_plane_bytes,
        delta_to_full_ratio,
        factor_to_full_ratio: ratio(mean_factor_bytes),
        reduction_ratio: delta_to_full_ratio.map(|r| 1.0 - r),
        chunks: rows,
    }
}

pub fn bandwidth_report(stream: &[u8]) -> Result<BandwidthReport, CodecError> {
    Ok(bandwidth_from_chunks(&parse_stream(stream)?))
}

/// Rounds every factor entry to the stored precision, so the sender's state
/// matches what the receiver reconstructs.
pub fn quantize_factors(factors: &mut [LowRankFactor], precision: Precision) {
    for f in factors {
        f.u.iter_mut().for_each(|v| *v = precision.round(*v));
        f.v.iter_mut().for_each(|v| *v = precision.round(*v));
    }
}
