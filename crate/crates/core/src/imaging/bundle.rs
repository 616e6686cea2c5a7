//! On-disk "stack bundle" format: a JSON header plus a raw blob.
//!
//! The blob holds `frames × channels × height × width` little-endian `f32`
//! values, frame-major, then channel-planar, then row-major. Stacks omit
//! `channels` (one channel); masks use one channel with values 0.0/1.0;
//! displacement fields use two channels (x then y).
//!
//! The header also names its blob file and carries the blob's SHA-256 so
//! truncation and corruption are detected on load.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{DiffusionMeta, DisplacementField, Frame, FrameStack, Mask};

const DTYPE: &str = "f32le";
const ORDER: &str = "row-major, frame-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub dtype: String,
    pub order: String,
    pub normalized: bool,
    pub meta: Vec<DiffusionMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    pub blob: String,
    pub sha256: String,
}

/// Raw bundle contents before interpretation as a stack, mask, or field.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub channels: Option<usize>,
    pub normalized: bool,
    pub meta: Vec<DiffusionMeta>,
    pub data: Vec<f32>,
}

impl Bundle {
    fn channel_count(&self) -> usize {
        self.channels.unwrap_or(1)
    }

    fn expected_len(&self) -> usize {
        self.frames * self.channel_count() * self.width * self.height
    }
}

/// Path of the blob that accompanies a header path.
pub fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(bundle: &Bundle, path: &Path) -> Result<()> {
    if bundle.data.len() != bundle.expected_len() {
        return Err(Error::Dimension(format!(
            "bundle holds {} values, header implies {}",
            bundle.data.len(),
            bundle.expected_len()
        )));
    }
    let mut blob = Vec::with_capacity(bundle.data.len() * 4);
    for v in &bundle.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let blob_file = blob_path(path);
    let header = BundleHeader {
        width: bundle.width,
        height: bundle.height,
        frames: bundle.frames,
        dtype: DTYPE.into(),
        order: ORDER.into(),
        normalized: bundle.normalized,
        meta: bundle.meta.clone(),
        channels: bundle.channels,
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    write_atomic(&blob_file, &blob)?;
    let mut json = serde_json::to_vec_pretty(&header)
        .map_err(|e| Error::Input(format!("cannot serialize header: {e}")))?;
    json.push(b'\n');
    write_atomic(path, &json)
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> u64 {
    let mut offset = 0usize;
    for (i, l) in text.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)) as u64;
        }
        offset += l.len() + 1;
    }
    text.len() as u64
}

pub fn read_bundle(path: &Path) -> Result<Bundle> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: BundleHeader = serde_json::from_slice(&text).map_err(|e| {
        Error::format(
            byte_offset(&text, e.line(), e.column()),
            format!("malformed header: {e}"),
        )
    })?;
    if header.dtype != DTYPE {
        return Err(Error::format(0, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.width == 0 || header.height == 0 {
        return Err(Error::format(0, "zero-sized frames in header"));
    }
    let blob_file = path
        .parent()
        .map(|p| p.join(&header.blob))
        .unwrap_or_else(|| PathBuf::from(&header.blob));
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;

    let bundle = Bundle {
        width: header.width,
        height: header.height,
        frames: header.frames,
        channels: header.channels,
        normalized: header.normalized,
        meta: header.meta,
        data: Vec::new(),
    };
    let expected = bundle.expected_len() * 4;
    if blob.len() < expected {
        return Err(Error::format(
            blob.len() as u64,
            format!("blob truncated: {} bytes, header implies {expected}", blob.len()),
        ));
    }
    if blob.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("blob has {} bytes, header implies {expected}", blob.len()),
        ));
    }
    if hex::encode(Sha256::digest(&blob)) != header.sha256 {
        return Err(Error::format(0, "blob checksum mismatch"));
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Bundle { data, ..bundle })
}

pub fn stack_to_bundle(stack: &FrameStack) -> Bundle {
    Bundle {
        width: stack.width(),
        height: stack.height(),
        frames: stack.len(),
        channels: None,
        normalized: stack.is_normalized(),
        meta: stack.frames().iter().map(|f| f.meta).collect(),
        data: stack
            .frames()
            .iter()
            .flat_map(|f| f.data.iter().map(|v| *v as f32))
            .collect(),
    }
}

pub fn save_stack(stack: &FrameStack, path: &Path) -> Result<()> {
    write_bundle(&stack_to_bundle(stack), path)
}

pub fn load_stack(path: &Path) -> Result<FrameStack> {
    let b = read_bundle(path)?;
    if b.channel_count() != 1 {
        return Err(Error::format(0, "a frame stack must have one channel"));
    }
    if b.meta.len() != b.frames {
        return Err(Error::format(
            0,
            format!("{} metadata entries for {} frames", b.meta.len(), b.frames),
        ));
    }
    let n = b.width * b.height;
    let frames = b
        .meta
        .iter()
        .enumerate()
        .map(|(i, meta)| {
            let data = b.data[i * n..(i + 1) * n].iter().map(|v| *v as f64).collect();
            Frame::new(b.width, b.height, data, *meta).map_err(|e| {
                Error::format((i * n * 4) as u64, format!("frame {i}: {e}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FrameStack::with_flag(frames, b.normalized).map_err(|e| Error::format(0, e.to_string()))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_bundle(
        &Bundle {
            width: mask.width,
            height: mask.height,
            frames: 1,
            channels: Some(1),
            normalized: false,
            meta: Vec::new(),
            data: mask.inside.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        },
        path,
    )
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let b = read_bundle(path)?;
    if b.frames != 1 || b.channel_count() != 1 {
        return Err(Error::format(0, "a mask bundle must hold one single-channel frame"));
    }
    Mask::new(b.width, b.height, b.data.iter().map(|v| *v > 0.5).collect())
}

pub fn save_fields(fields: &[DisplacementField], path: &Path) -> Result<()> {
    let (width, height) = fields
        .first()
        .map(|f| (f.width, f.height))
        .ok_or_else(|| Error::Input("no fields to save".into()))?;
    let mut data = Vec::with_capacity(fields.len() * 2 * width * height);
    for f in fields {
        f.check_matches(width, height)?;
        data.extend(f.vectors.iter().map(|v| v[0] as f32));
        data.extend(f.vectors.iter().map(|v| v[1] as f32));
    }
    write_bundle(
        &Bundle {
            width,
            height,
            frames: fields.len(),
            channels: Some(2),
            normalized: false,
            meta: Vec::new(),
            data,
        },
        path,
    )
}

pub fn load_fields(path: &Path) -> Result<Vec<DisplacementField>> {
    let b = read_bundle(path)?;
    if b.channel_count() != 2 {
        return Err(Error::format(0, "a displacement bundle must have two channels"));
    }
    let n = b.width * b.height;
    (0..b.frames)
        .map(|i| {
            let xs = &b.data[2 * i * n..(2 * i + 1) * n];
            let ys = &b.data[(2 * i + 1) * n..(2 * i + 2) * n];
            DisplacementField::new(
                b.width,
                b.height,
                xs.iter().zip(ys).map(|(x, y)| [*x as f64, *y as f64]).collect(),
            )
        })
        .collect()
}
