//! NIfTI-1 subset reader and writer.
//!
//! Little-endian single-file `.nii` (magic `n+1\0`) with datatypes uint8,
//! int16, int32, float32 and float64. Geometry comes from the sform when set,
//! falling back to the qform and finally to pixdim with identity direction.
//! `.nii.gz` is handled transparently on both read and write; uncompressed
//! `.nii` is the canonical format.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{AtlasError, Result};
use crate::geometry::Geometry;
use crate::volume::{LabelMap, Volume, MAX_LABEL};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: u32 = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// The header fields this toolkit consumes.
#[derive(Debug, Clone)]
struct Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| AtlasError::io(path, e))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        MultiGzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| AtlasError::io(path, e))?;
    } else {
        let mut f = file;
        f.read_to_end(&mut bytes).map_err(|e| AtlasError::io(path, e))?;
    }
    Ok(bytes)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(AtlasError::TruncatedPayload {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    if &bytes[344..348] != MAGIC {
        return Err(AtlasError::BadMagic(path.to_path_buf()));
    }
    let mut c = std::io::Cursor::new(bytes);
    let sizeof_hdr = c.read_i32::<LittleEndian>().unwrap();
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(AtlasError::BadMagic(path.to_path_buf()));
    }
    let at = |pos: u64| {
        let mut cur = std::io::Cursor::new(bytes);
        cur.set_position(pos);
        cur
    };
    let mut cur = at(40);
    let mut dim = [0i16; 8];
    for d in dim.iter_mut() {
        *d = cur.read_i16::<LittleEndian>().unwrap();
    }
    let datatype = at(70).read_i16::<LittleEndian>().unwrap();
    let mut cur = at(76);
    let mut pixdim = [0f32; 8];
    for p in pixdim.iter_mut() {
        *p = cur.read_f32::<LittleEndian>().unwrap();
    }
    let vox_offset = at(108).read_f32::<LittleEndian>().unwrap();
    let scl_slope = at(112).read_f32::<LittleEndian>().unwrap();
    let scl_inter = at(116).read_f32::<LittleEndian>().unwrap();
    let qform_code = at(252).read_i16::<LittleEndian>().unwrap();
    let sform_code = at(254).read_i16::<LittleEndian>().unwrap();
    let mut cur = at(256);
    let quatern = [
        cur.read_f32::<LittleEndian>().unwrap(),
        cur.read_f32::<LittleEndian>().unwrap(),
        cur.read_f32::<LittleEndian>().unwrap(),
    ];
    let qoffset = [
        cur.read_f32::<LittleEndian>().unwrap(),
        cur.read_f32::<LittleEndian>().unwrap(),
        cur.read_f32::<LittleEndian>().unwrap(),
    ];
    let mut srow = [[0f32; 4]; 3];
    let mut cur = at(280);
    for row in srow.iter_mut() {
        for v in row.iter_mut() {
            *v = cur.read_f32::<LittleEndian>().unwrap();
        }
    }
    Ok(Header {
        dim,
        datatype,
        pixdim,
        vox_offset,
        scl_slope,
        scl_inter,
        qform_code,
        sform_code,
        quatern,
        qoffset,
        srow,
    })
}

fn datatype_size(code: i16) -> Result<usize> {
    match code {
        DT_UINT8 => Ok(1),
        DT_INT16 => Ok(2),
        DT_INT32 => Ok(4),
        DT_FLOAT32 => Ok(4),
        DT_FLOAT64 => Ok(8),
        other => Err(AtlasError::UnsupportedDatatype(other)),
    }
}

/// Geometry from sform, then qform, then pixdim with identity direction.
fn header_geometry(h: &Header) -> Result<Geometry> {
    let dims = [h.dim[1] as usize, h.dim[2] as usize, h.dim[3] as usize];
    if h.sform_code > 0 {
        let mut spacing = [0.0; 3];
        let mut direction = [[0.0; 3]; 3];
        for c in 0..3 {
            let norm = (0..3)
                .map(|r| f64::from(h.srow[r][c]).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm <= 0.0 {
                return Err(AtlasError::InvalidGeometry(format!(
                    "sform column {c} has zero norm"
                )));
            }
            spacing[c] = norm;
            for r in 0..3 {
                direction[r][c] = f64::from(h.srow[r][c]) / norm;
            }
        }
        let origin = [
            f64::from(h.srow[0][3]),
            f64::from(h.srow[1][3]),
            f64::from(h.srow[2][3]),
        ];
        let g = Geometry {
            dims,
            spacing,
            origin,
            direction,
        };
        g.validate()?;
        return Ok(g);
    }
    if h.qform_code > 0 {
        let (b, c, d) = (
            f64::from(h.quatern[0]),
            f64::from(h.quatern[1]),
            f64::from(h.quatern[2]),
        );
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut direction = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - b * b - c * c,
            ],
        ];
        for row in direction.iter_mut() {
            row[2] *= qfac;
        }
        let g = Geometry {
            dims,
            spacing: [
                f64::from(h.pixdim[1]),
                f64::from(h.pixdim[2]),
                f64::from(h.pixdim[3]),
            ],
            origin: [
                f64::from(h.qoffset[0]),
                f64::from(h.qoffset[1]),
                f64::from(h.qoffset[2]),
            ],
            direction,
        };
        g.validate()?;
        return Ok(g);
    }
    let g = Geometry::new(
        dims,
        [
            f64::from(h.pixdim[1]),
            f64::from(h.pixdim[2]),
            f64::from(h.pixdim[3]),
        ],
        [0.0; 3],
    );
    g.validate()?;
    Ok(g)
}

fn decode_data(bytes: &[u8], h: &Header) -> Result<Vec<f64>> {
    let n = (h.dim[1] as usize) * (h.dim[2] as usize) * (h.dim[3] as usize);
    let elem = datatype_size(h.datatype)?;
    let offset = if h.vox_offset >= HEADER_SIZE as f32 {
        h.vox_offset as usize
    } else {
        VOX_OFFSET as usize
    };
    if bytes.len() < offset + n * elem {
        return Err(AtlasError::TruncatedPayload {
            expected: offset + n * elem,
            found: bytes.len(),
        });
    }
    let raw = &bytes[offset..offset + n * elem];
    let slope = if h.scl_slope == 0.0 {
        1.0
    } else {
        f64::from(h.scl_slope)
    };
    let inter = f64::from(h.scl_inter);
    let mut out = Vec::with_capacity(n);
    match h.datatype {
        DT_UINT8 => {
            for &b in raw {
                out.push(slope * f64::from(b) + inter);
            }
        }
        DT_INT16 => {
            for chunk in raw.chunks_exact(2) {
                let v = i16::from_le_bytes([chunk[0], chunk[1]]);
                out.push(slope * f64::from(v) + inter);
            }
        }
        DT_INT32 => {
            for chunk in raw.chunks_exact(4) {
                let v = i32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                out.push(slope * f64::from(v) + inter);
            }
        }
        DT_FLOAT32 => {
            for chunk in raw.chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                out.push(slope * f64::from(v) + inter);
            }
        }
        DT_FLOAT64 => {
            for chunk in raw.chunks_exact(8) {
                let mut b = [0u8; 8];
                b.copy_from_slice(chunk);
                out.push(slope * f64::from_le_bytes(b) + inter);
            }
        }
        other => return Err(AtlasError::UnsupportedDatatype(other)),
    }
    Ok(out)
}

fn load(path: &Path) -> Result<(Header, Geometry, Vec<f64>)> {
    let bytes = read_all(path)?;
    let h = parse_header(&bytes, path)?;
    if h.dim[0] != 3 {
        return Err(AtlasError::BadDimensionality(h.dim[0]));
    }
    let geom = header_geometry(&h)?;
    let data = decode_data(&bytes, &h)?;
    Ok((h, geom, data))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (_, geom, data) = load(path.as_ref())?;
    Volume::new(geom, data.into_iter().map(|v| v as f32).collect())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (_, geom, data) = load(path.as_ref())?;
    let mut labels = Vec::with_capacity(data.len());
    for v in data {
        let r = v.round();
        if (v - r).abs() > 1e-3 || r < 0.0 || r > f64::from(MAX_LABEL) {
            return Err(AtlasError::LabelOutOfRange(v));
        }
        labels.push(r as u8);
    }
    LabelMap::new(geom, labels)
}

fn build_header(geom: &Geometry, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE];
    let mut w = std::io::Cursor::new(&mut h[..]);
    w.write_i32::<LittleEndian>(HEADER_SIZE as i32).unwrap(); // sizeof_hdr
    w.set_position(38);
    w.write_u8(b'r').unwrap(); // regular
    w.set_position(40);
    let dim: [i16; 8] = [
        3,
        geom.dims[0] as i16,
        geom.dims[1] as i16,
        geom.dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for d in dim {
        w.write_i16::<LittleEndian>(d).unwrap();
    }
    w.set_position(70);
    w.write_i16::<LittleEndian>(datatype).unwrap();
    w.write_i16::<LittleEndian>(bitpix).unwrap();
    w.set_position(76);
    let pixdim: [f32; 8] = [
        1.0,
        geom.spacing[0] as f32,
        geom.spacing[1] as f32,
        geom.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for p in pixdim {
        w.write_f32::<LittleEndian>(p).unwrap();
    }
    w.write_f32::<LittleEndian>(VOX_OFFSET as f32).unwrap(); // vox_offset
    w.write_f32::<LittleEndian>(1.0).unwrap(); // scl_slope
    w.write_f32::<LittleEndian>(0.0).unwrap(); // scl_inter
    w.set_position(254);
    w.write_i16::<LittleEndian>(1).unwrap(); // sform_code
    w.set_position(280);
    for r in 0..3 {
        for c in 0..3 {
            w.write_f32::<LittleEndian>((geom.direction[r][c] * geom.spacing[c]) as f32)
                .unwrap();
        }
        w.write_f32::<LittleEndian>(geom.origin[r] as f32).unwrap();
    }
    w.set_position(344);
    w.write_all(MAGIC).unwrap();
    h
}

fn write_file(path: &Path, header: Vec<u8>, payload: &[u8]) -> Result<()> {
    let mut body = header;
    body.extend_from_slice(&[0u8; 4]); // no extensions
    body.extend_from_slice(payload);
    let file = File::create(path).map_err(|e| AtlasError::io(path, e))?;
    if is_gz(path) {
        // mtime defaults to zero, keeping output byte-stable across runs.
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&body).map_err(|e| AtlasError::io(path, e))?;
        enc.finish().map_err(|e| AtlasError::io(path, e))?;
    } else {
        let mut f = file;
        f.write_all(&body).map_err(|e| AtlasError::io(path, e))?;
    }
    Ok(())
}

/// Write a volume as little-endian float32 with the sform set.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = build_header(&volume.geom, DT_FLOAT32, 32);
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), header, &payload)
}

/// Write a label map as little-endian int16 with the sform set.
pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let header = build_header(&labels.geom, DT_INT16, 16);
    let mut payload = Vec::with_capacity(labels.data.len() * 2);
    for &v in &labels.data {
        payload.extend_from_slice(&i16::from(v).to_le_bytes());
    }
    write_file(path.as_ref(), header, &payload)
}
