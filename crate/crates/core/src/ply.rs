//! Binary little-endian point-attribute files in the usual 3DGS export layout.
//!
//! Attributes: `x y z nx ny nz f_dc_{0..2} f_rest_{0..44} opacity
//! scale_{0..2} rot_{0..3}`, channel-major for `f_rest`. Standard exports store
//! opacity as a logit and scales as logs; these are activated on load. Files
//! written by [`save_cloud`] default to activated storage, marked by the header
//! comment `activations linear`, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cloud::{CloudError, GaussianCloud, ShCoeffs, SH_COEFFS};
use crate::geom::{self, Vec3};
use crate::scalar::{logit, sigmoid, Real};

const LINEAR_COMMENT: &str = "activations linear";

/// How opacity and scale are stored on disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CloudEncoding {
    /// Opacity in `[0,1]` and positive linear scales.
    #[default]
    Linear,
    /// Opacity logits and log-scales, as written by 3DGS trainers.
    Activation,
}

/// Defaults for files that carry positions only.
pub const DEFAULT_POINT_SCALE: f64 = 0.01;
pub const DEFAULT_POINT_OPACITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
enum PropType {
    F32,
    F64,
    U8,
}

impl PropType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(Self::F32),
            "double" | "float64" => Some(Self::F64),
            "uchar" | "uint8" => Some(Self::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }
}

struct Header {
    count: usize,
    props: Vec<(String, PropType)>,
    encoding: CloudEncoding,
}

fn malformed(msg: impl Into<String>) -> CloudError {
    CloudError::MalformedFile(msg.into())
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Header, CloudError> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<(), CloudError> {
        line.clear();
        let n = reader.read_line(line)?;
        if n == 0 {
            return Err(malformed("unexpected end of header"));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(malformed("missing 'ply' magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut encoding = CloudEncoding::Activation;
    let mut in_vertex = false;
    let mut format_ok = false;
    loop {
        next(&mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(malformed(format!("unsupported format '{other}'"))),
            ["comment", rest @ ..] => {
                if rest.join(" ") == LINEAR_COMMENT {
                    encoding = CloudEncoding::Linear;
                }
            }
            ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| malformed("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(malformed(format!("unsupported element '{name}'")));
            }
            ["property", ty, name] if in_vertex => {
                let ty = PropType::parse(ty).ok_or_else(|| malformed(format!("unsupported type '{ty}'")))?;
                props.push((name.to_string(), ty));
            }
            [] => {}
            _ => return Err(malformed(format!("unexpected header line '{}'", line.trim_end()))),
        }
    }
    if !format_ok {
        return Err(malformed("missing format line"));
    }
    let count = count.ok_or_else(|| malformed("missing vertex element"))?;
    Ok(Header {
        count,
        props,
        encoding,
    })
}

/// Column lookup for one attribute record.
struct Layout {
    offsets: Vec<(usize, PropType)>,
    stride: usize,
    index: std::collections::HashMap<String, usize>,
}

impl Layout {
    fn new(props: &[(String, PropType)]) -> Result<Self, CloudError> {
        let mut offsets = Vec::with_capacity(props.len());
        let mut index = std::collections::HashMap::new();
        let mut off = 0;
        for (i, (name, ty)) in props.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(malformed(format!("duplicate property '{name}'")));
            }
            offsets.push((off, *ty));
            off += ty.size();
        }
        Ok(Self {
            offsets,
            stride: off,
            index,
        })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    fn value(&self, record: &[u8], col: usize) -> f64 {
        let (off, ty) = self.offsets[col];
        match ty {
            PropType::F32 => f32::from_le_bytes(record[off..off + 4].try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(record[off..off + 8].try_into().unwrap()),
            PropType::U8 => record[off] as f64,
        }
    }
}

fn require(layout: &Layout, names: &[&str]) -> Result<Vec<usize>, CloudError> {
    names
        .iter()
        .map(|n| layout.col(n).ok_or_else(|| malformed(format!("missing property '{n}'"))))
        .collect()
}

/// Reads a cloud file, applying activations and validating every invariant.
pub fn load_cloud<T: Real>(path: impl AsRef<Path>) -> Result<GaussianCloud<T>, CloudError> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader)?;
    let layout = Layout::new(&header.props)?;

    let pos = require(&layout, &["x", "y", "z"])?;
    let full = layout.col("opacity").is_some();
    let (dc, scale, rot, opacity) = if full {
        (
            require(&layout, &["f_dc_0", "f_dc_1", "f_dc_2"])?,
            require(&layout, &["scale_0", "scale_1", "scale_2"])?,
            require(&layout, &["rot_0", "rot_1", "rot_2", "rot_3"])?,
            layout.col("opacity"),
        )
    } else {
        (Vec::new(), Vec::new(), Vec::new(), None)
    };
    let mut rest = Vec::new();
    while let Some(c) = layout.col(&format!("f_rest_{}", rest.len())) {
        rest.push(c);
    }
    if rest.len() % 3 != 0 {
        return Err(malformed(format!("{} f_rest attributes is not a multiple of 3", rest.len())));
    }
    let per_channel = rest.len() / 3;
    let degree = match per_channel {
        0 => 0,
        3 => 1,
        8 => 2,
        15 => 3,
        n => return Err(malformed(format!("{n} rest coefficients per channel"))),
    };

    let mut buf = vec![0u8; layout.stride * header.count];
    reader
        .read_exact(&mut buf)
        .map_err(|_| malformed("file shorter than declared record count"))?;
    let mut tail = [0u8; 1];
    if reader.read(&mut tail)? != 0 {
        return Err(malformed("trailing bytes after records"));
    }

    let mut means = Vec::with_capacity(header.count);
    let mut scales = Vec::with_capacity(header.count);
    let mut rotations = Vec::with_capacity(header.count);
    let mut opacities = Vec::with_capacity(header.count);
    let mut shs = Vec::with_capacity(header.count);
    let linear = header.encoding == CloudEncoding::Linear;
    for (i, rec) in buf.chunks_exact(layout.stride.max(1)).take(header.count).enumerate() {
        let get = |c: usize| layout.value(rec, c);
        let check = |v: f64, what: &str| -> Result<f64, CloudError> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(CloudError::InvariantViolation(format!("record {i}: non-finite {what}")))
            }
        };
        let mut mean: Vec3<T> = [T::zero(); 3];
        for (k, &c) in pos.iter().enumerate() {
            mean[k] = T::lit(check(get(c), "position")?);
        }
        means.push(mean);
        if !full {
            scales.push([T::lit(DEFAULT_POINT_SCALE); 3]);
            rotations.push(geom::quat_identity());
            opacities.push(T::lit(DEFAULT_POINT_OPACITY));
            shs.push([[T::zero(); 3]; SH_COEFFS]);
            continue;
        }
        let mut s: Vec3<T> = [T::zero(); 3];
        for (k, &c) in scale.iter().enumerate() {
            let raw = check(get(c), "scale")?;
            s[k] = if linear { T::lit(raw) } else { T::lit(raw).exp() };
        }
        scales.push(s);
        let mut q = [T::zero(); 4];
        for (k, &c) in rot.iter().enumerate() {
            q[k] = T::lit(check(get(c), "rotation")?);
        }
        let qn = geom::quat_norm(q);
        if !(qn > T::zero()) {
            return Err(CloudError::InvariantViolation(format!("record {i}: zero quaternion")));
        }
        if (qn.as_f64() - 1.0).abs() > 1e-6 {
            q = geom::quat_normalize(q);
        }
        rotations.push(q);
        let raw_o = check(get(opacity.unwrap()), "opacity")?;
        let o = if linear { T::lit(raw_o) } else { sigmoid(T::lit(raw_o)) };
        if !(o >= T::zero() && o <= T::one()) {
            return Err(CloudError::InvariantViolation(format!(
                "record {i}: opacity {raw_o} outside [0, 1]"
            )));
        }
        opacities.push(o);
        let mut sh: ShCoeffs<T> = [[T::zero(); 3]; SH_COEFFS];
        for (c, &col) in dc.iter().enumerate() {
            sh[0][c] = T::lit(check(get(col), "colour")?);
        }
        for ch in 0..3 {
            for k in 0..per_channel {
                sh[k + 1][ch] = T::lit(check(get(rest[ch * per_channel + k]), "SH")?);
            }
        }
        shs.push(sh);
    }
    let active = if full { degree } else { 0 };
    let cloud = GaussianCloud::new(means, scales, rotations, opacities, shs, active)?;
    Ok(cloud)
}

/// Writes a cloud with all SH bands. `encoding` selects activated or raw storage.
pub fn save_cloud_with<T: Real>(
    cloud: &GaussianCloud<T>,
    path: impl AsRef<Path>,
    encoding: CloudEncoding,
) -> Result<(), CloudError> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    let rest = 3 * (SH_COEFFS - 1);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    if encoding == CloudEncoding::Linear {
        header.push_str(&format!("comment {LINEAR_COMMENT}\n"));
    }
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for k in 0..rest {
        header.push_str(&format!("property float f_rest_{k}\n"));
    }
    for name in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;

    let per_channel = SH_COEFFS - 1;
    let put = |w: &mut BufWriter<File>, v: T| w.write_all(&v.as_f32().to_le_bytes());
    for i in 0..cloud.len() {
        for v in cloud.means()[i] {
            put(&mut w, v)?;
        }
        for _ in 0..3 {
            put(&mut w, T::zero())?;
        }
        let sh = &cloud.sh()[i];
        for c in 0..3 {
            put(&mut w, sh[0][c])?;
        }
        for c in 0..3 {
            for k in 0..per_channel {
                put(&mut w, sh[k + 1][c])?;
            }
        }
        let o = cloud.opacities()[i];
        put(&mut w, if encoding == CloudEncoding::Linear { o } else { logit(o) })?;
        for s in cloud.scales()[i] {
            put(&mut w, if encoding == CloudEncoding::Linear { s } else { s.ln() })?;
        }
        for q in cloud.rotations()[i] {
            put(&mut w, q)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a cloud in the default linear encoding, bit-exact for `f32`.
pub fn save_cloud<T: Real>(cloud: &GaussianCloud<T>, path: impl AsRef<Path>) -> Result<(), CloudError> {
    save_cloud_with(cloud, path, CloudEncoding::Linear)
}

/// Writes a positions-only file (the output of point sampling).
pub fn save_positions<T: Real>(points: &[Vec3<T>], path: impl AsRef<Path>) -> Result<(), CloudError> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    for p in points {
        for v in p {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
