//! Binary file formats: tensors, label masks, checkpoints, and PPM images.
//!
//! Three little-endian formats, each guarded by a magic string and version:
//!
//! * `EFTN` — n-dimensional f64/f32 tensors (u16 version, u8 dtype, u8 rank,
//!   rank×u32 dims, row-major payload);
//! * `EFMK` — per-pixel label masks (u16 version, u32 H, u32 W, u16 M, then
//!   H·W u64 class bitmasks; the value 0 is the unknown-content sentinel);
//! * `EFCN` — model checkpoints (frame, architecture description, prototype
//!   count, then every parameter as f64 in the model's canonical flat order).
//!
//! All round trips are bit-exact: f64 values are moved via their raw bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::backbone::{ArchDesc, LayerDesc};
use crate::ds_layer::PrototypeBank;
use crate::frame::PixelLabel;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::{ClassSet, Error, Frame, Result};

const TENSOR_MAGIC: &[u8; 4] = b"EFTN";
const MASK_MAGIC: &[u8; 4] = b"EFMK";
const CHECKPOINT_MAGIC: &[u8; 4] = b"EFCN";

const TENSOR_VERSION: u16 = 1;
const MASK_VERSION: u16 = 1;
const CHECKPOINT_VERSION: u16 = 1;

/// A label mask as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub labels: Vec<PixelLabel>,
}

// ---------------------------------------------------------------------------
// low-level helpers

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), msg.into())
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<'p, R: Read> Reader<'p, R> {
    fn new(inner: R, path: &'p Path) -> Self {
        Reader { inner, path }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| fmt_err(self.path, "file truncated"))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn magic(&mut self, expected: &[u8; 4], kind: &str) -> Result<()> {
        let got = self.bytes::<4>()?;
        if &got != expected {
            return Err(fmt_err(self.path, format!("not a {kind} file (bad magic)")));
        }
        Ok(())
    }

    fn version(&mut self, expected: u16, kind: &str) -> Result<()> {
        let got = self.u16()?;
        if got != expected {
            return Err(fmt_err(
                self.path,
                format!("unsupported {kind} version {got} (expected {expected})"),
            ));
        }
        Ok(())
    }

    /// Fails if any bytes remain unread.
    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(fmt_err(self.path, "trailing bytes after payload")),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

// ---------------------------------------------------------------------------
// EFTN tensors

/// Writes a tensor as an `EFTN` file (always f64 payload).
pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[1u8])?; // dtype 1 = f64
    let rank = u8::try_from(t.rank())
        .map_err(|_| fmt_err(path, format!("rank {} exceeds format limit", t.rank())))?;
    w.write_all(&[rank])?;
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| fmt_err(path, format!("dimension {d} exceeds format limit")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `EFTN` file. f32 payloads are widened to f64.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = Reader::new(BufReader::new(File::open(path)?), path);
    r.magic(TENSOR_MAGIC, "tensor")?;
    r.version(TENSOR_VERSION, "tensor")?;
    let dtype = r.u8()?;
    if dtype > 1 {
        return Err(fmt_err(path, format!("unknown tensor dtype {dtype}")));
    }
    let rank = r.u8()? as usize;
    if rank == 0 {
        return Err(fmt_err(path, "tensor rank must be positive"));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let v = if dtype == 1 {
            r.f64()?
        } else {
            f32::from_le_bytes(r.bytes()?) as f64
        };
        data.push(v);
    }
    r.expect_eof()?;
    Tensor::from_vec(&dims, data)
}

// ---------------------------------------------------------------------------
// EFMK label masks

/// Writes a label mask as an `EFMK` file. Novel pixels store the sentinel 0.
pub fn save_mask(
    path: impl AsRef<Path>,
    labels: &[PixelLabel],
    height: usize,
    width: usize,
    class_count: usize,
) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != height * width {
        return Err(Error::Dimension {
            context: "mask label count",
            expected: height * width,
            got: labels.len(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MASK_MAGIC)?;
    w.write_all(&MASK_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(height).map_err(|_| fmt_err(path, "height too large"))?.to_le_bytes())?;
    w.write_all(&u32::try_from(width).map_err(|_| fmt_err(path, "width too large"))?.to_le_bytes())?;
    w.write_all(&u16::try_from(class_count).map_err(|_| fmt_err(path, "class count too large"))?.to_le_bytes())?;
    for label in labels {
        let bits = match label {
            PixelLabel::Known(set) => {
                if set.is_empty() || !set.fits_frame(class_count) {
                    return Err(fmt_err(path, "label set outside the frame"));
                }
                set.bits()
            }
            PixelLabel::Novel(_) => 0,
        };
        w.write_all(&bits.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `EFMK` file. Sentinel-0 pixels load as `PixelLabel::Novel(0)`
/// (the on-disk format does not distinguish novel classes).
pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let mut r = Reader::new(BufReader::new(File::open(path)?), path);
    r.magic(MASK_MAGIC, "mask")?;
    r.version(MASK_VERSION, "mask")?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let class_count = r.u16()? as usize;
    if class_count == 0 {
        return Err(fmt_err(path, "mask class count must be positive"));
    }
    let mut labels = Vec::with_capacity(height * width);
    for px in 0..height * width {
        let bits = r.u64()?;
        if bits == 0 {
            labels.push(PixelLabel::Novel(0));
            continue;
        }
        let set = ClassSet::from_bits(bits);
        if !set.fits_frame(class_count) {
            return Err(fmt_err(
                path,
                format!("pixel {px} has a class bit beyond the {class_count} frame classes"),
            ));
        }
        labels.push(PixelLabel::Known(set));
    }
    r.expect_eof()?;
    Ok(LabelMask {
        height,
        width,
        class_count,
        labels,
    })
}

// ---------------------------------------------------------------------------
// EFCN checkpoints

/// Writes a model checkpoint.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

    let frame = model.frame();
    w.write_all(&(frame.class_count() as u16).to_le_bytes())?;
    for name in frame.names() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| fmt_err(path, "class name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
    }

    w.write_all(&(model.in_channels() as u32).to_le_bytes())?;
    w.write_all(&(model.bank().prototype_count() as u32).to_le_bytes())?;

    let arch = model.arch();
    w.write_all(&(arch.layers.len() as u16).to_le_bytes())?;
    for layer in &arch.layers {
        match *layer {
            LayerDesc::Conv { kernel, channels, stride, relu } => {
                w.write_all(&[0u8])?;
                for v in [kernel, channels, stride] {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
                w.write_all(&[relu as u8])?;
            }
            LayerDesc::Pool { window } => {
                w.write_all(&[1u8])?;
                w.write_all(&(window as u32).to_le_bytes())?;
            }
            LayerDesc::Deconv { kernel, channels, factor, relu } => {
                w.write_all(&[2u8])?;
                for v in [kernel, channels, factor] {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
                w.write_all(&[relu as u8])?;
            }
        }
    }
    match arch.skip {
        None => w.write_all(&[0u8])?,
        Some((source, target)) => {
            w.write_all(&[1u8])?;
            w.write_all(&(source as u32).to_le_bytes())?;
            w.write_all(&(target as u32).to_le_bytes())?;
        }
    }

    let params = model.flatten_params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a model checkpoint back into a fully assembled [`Model`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut r = Reader::new(BufReader::new(File::open(path)?), path);
    r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
    r.version(CHECKPOINT_VERSION, "checkpoint")?;

    let class_count = r.u16()? as usize;
    let mut names = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let len = r.u16()? as usize;
        let mut buf = vec![0u8; len];
        r.inner
            .read_exact(&mut buf)
            .map_err(|_| fmt_err(path, "file truncated"))?;
        names.push(
            String::from_utf8(buf).map_err(|_| fmt_err(path, "class name is not valid UTF-8"))?,
        );
    }
    let frame = Frame::new(names)?;

    let in_channels = r.u32()? as usize;
    let prototype_count = r.u32()? as usize;

    let layer_count = r.u16()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.u8()?;
        let layer = match tag {
            0 => LayerDesc::Conv {
                kernel: r.u32()? as usize,
                channels: r.u32()? as usize,
                stride: r.u32()? as usize,
                relu: r.u8()? != 0,
            },
            1 => LayerDesc::Pool { window: r.u32()? as usize },
            2 => LayerDesc::Deconv {
                kernel: r.u32()? as usize,
                channels: r.u32()? as usize,
                factor: r.u32()? as usize,
                relu: r.u8()? != 0,
            },
            other => {
                return Err(fmt_err(path, format!("unknown layer tag {other}")));
            }
        };
        layers.push(layer);
    }
    let skip = match r.u8()? {
        0 => None,
        1 => Some((r.u32()? as usize, r.u32()? as usize)),
        other => return Err(fmt_err(path, format!("invalid skip flag {other}"))),
    };
    let arch = ArchDesc { layers, skip };

    let param_count = r.u64()? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(r.f64()?);
    }
    r.expect_eof()?;

    // Rebuild with throwaway random weights, then overwrite every parameter.
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let backbone = arch.build(in_channels, &mut rng)?;
    let bank = PrototypeBank::init_random(
        prototype_count,
        backbone.out_channels(),
        frame.class_count(),
        &mut rng,
    )?;
    let mut model = Model::new(frame, in_channels, backbone, bank)?;
    if params.len() != model.param_count() {
        return Err(fmt_err(
            path,
            format!(
                "parameter count {} does not match the stored architecture ({} expected)",
                params.len(),
                model.param_count()
            ),
        ));
    }
    model.set_params(&params)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// PPM images

/// Writes an 8-bit RGB image as binary PPM (`P6`).
pub fn save_ppm(path: impl AsRef<Path>, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    let path = path.as_ref();
    if rgb.len() != height * width * 3 {
        return Err(Error::Dimension {
            context: "PPM pixel buffer",
            expected: height * width * 3,
            got: rgb.len(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}
