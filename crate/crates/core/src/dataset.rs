//! Single-file sequence container and ASCII PLY export.
//!
//! Container layout, little-endian: magic `S4DQ`, version, `T`, `H`, `W`, `M`
//! (u32 each), then per frame, as f32: image `3HW`, depth `HW`, points `3HW`,
//! pose 9, tracks `2M`, visibility `M`, valid mask `HW`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::attention::{read_reals, write_reals};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, POSE_DIMS};
use crate::synth::{SceneFrameGt, Sequence};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"S4DQ";
const VERSION: u32 = 1;

/// File extension of sequence containers.
pub const EXTENSION: &str = "s4dq";

pub fn write_sequence<W: Write>(seq: &Sequence, w: &mut W) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid("refusing to write an empty sequence"));
    }
    let (h, wd, m) = (seq.height(), seq.width(), seq.track_count());
    for (t, f) in seq.frames.iter().enumerate() {
        let ok = f.image.shape() == [3, h, wd]
            && f.depth.shape() == [h, wd]
            && f.points.shape() == [3, h, wd]
            && f.tracks.shape() == [m, 2]
            && f.visibility.shape() == [m]
            && f.valid.shape() == [h, wd];
        if !ok {
            return Err(Error::invalid(format!("frame {t} does not match the sequence layout")));
        }
    }
    w.write_all(MAGIC)?;
    for v in [VERSION, seq.len() as u32, h as u32, wd as u32, m as u32] {
        w.write_u32::<LittleEndian>(v)?;
    }
    for f in &seq.frames {
        write_reals(w, f.image.data())?;
        write_reals(w, f.depth.data())?;
        write_reals(w, f.points.data())?;
        let pose: Vec<f32> = f.pose.to_vec().iter().map(|&v| v as f32).collect();
        write_reals(w, &pose)?;
        write_reals(w, f.tracks.data())?;
        write_reals(w, f.visibility.data())?;
        write_reals(w, f.valid.data())?;
    }
    Ok(())
}

fn eof_to_format(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated sequence file".into())
    } else {
        Error::Stream(e)
    }
}

pub fn read_sequence<R: Read>(r: &mut R) -> Result<Sequence> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_to_format)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a sequence container".into()));
    }
    let mut header = [0usize; 5];
    for h in header.iter_mut() {
        *h = r.read_u32::<LittleEndian>().map_err(eof_to_format)? as usize;
    }
    let [version, t, h, w, m] = header;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported sequence version {version}")));
    }
    if t == 0 {
        return Err(Error::Format("sequence has no frames".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Format("sequence has empty images".into()));
    }
    let hw = h * w;
    let mut frames = Vec::with_capacity(t);
    let read = |r: &mut R, n: usize| -> Result<Vec<f32>> {
        read_reals(r, n).map_err(|e| match e {
            Error::Format(_) => Error::Format("truncated sequence file".into()),
            other => other,
        })
    };
    for _ in 0..t {
        let image = Tensor::new(vec![3, h, w], read(r, 3 * hw)?)?;
        let depth = Tensor::new(vec![h, w], read(r, hw)?)?;
        let points = Tensor::new(vec![3, h, w], read(r, 3 * hw)?)?;
        let pose: Vec<f64> = read(r, POSE_DIMS)?.iter().map(|&v| v as f64).collect();
        let tracks = Tensor::new(vec![m, 2], read(r, 2 * m)?)?;
        let visibility = Tensor::new(vec![m], read(r, m)?)?;
        let valid = Tensor::new(vec![h, w], read(r, hw)?)?;
        frames.push(SceneFrameGt {
            image,
            depth,
            points,
            pose: CameraPose::from_vec(&pose)?,
            tracks,
            visibility,
            valid,
        });
    }
    Ok(Sequence { frames })
}

pub fn save_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_sequence(seq, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_sequence(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Stream(source) => Error::io(path, source),
        other => other,
    })
}

/// Container files of a dataset directory, sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == EXTENSION) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    let files = dataset_files(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no .{EXTENSION} files in {}", dir.display())));
    }
    files.iter().map(|p| load_sequence(p)).collect()
}

/// Writes `seq_0000.s4dq`, `seq_0001.s4dq`, ... into `dir`.
pub fn save_dataset(seqs: &[Sequence], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("seq_{i:04}.{EXTENSION}"));
            save_sequence(s, &p)?;
            Ok(p)
        })
        .collect()
}

/// One vertex of a PLY export.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyPoint {
    pub position: [f32; 3],
    pub color: [f32; 3],
    pub confidence: f32,
}

/// ASCII PLY with position, 8-bit colour and a `confidence` property.
pub fn write_ply<W: Write>(points: &[PlyPoint], w: &mut W) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    for c in ["red", "green", "blue"] {
        writeln!(w, "property uchar {c}")?;
    }
    writeln!(w, "property float confidence")?;
    writeln!(w, "end_header")?;
    for p in points {
        let c = p.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            p.position[0], p.position[1], p.position[2], c[0], c[1], c[2], p.confidence
        )?;
    }
    Ok(())
}

pub fn save_ply(points: &[PlyPoint], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_ply(points, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Valid pixels of a point map as PLY vertices, coloured by `image`.
pub fn frame_points(points: &Tensor, image: &Tensor, confidence: &Tensor, valid: Option<&Tensor>) -> Vec<PlyPoint> {
    let hw = confidence.numel();
    (0..hw)
        .filter(|&i| valid.is_none_or(|v| v.data()[i] > 0.5))
        .map(|i| PlyPoint {
            position: [points.data()[i], points.data()[hw + i], points.data()[2 * hw + i]],
            color: [image.data()[i], image.data()[hw + i], image.data()[2 * hw + i]],
            confidence: confidence.data()[i],
        })
        .collect()
}
