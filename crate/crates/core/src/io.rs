//! On-disk formats: a plain-text `key: value` header next to a raw
//! little-endian f32 payload.
//!
//! The header names its payload with a `data_file` entry, resolved relative
//! to the header's directory. Values are held as f64 in memory and stored
//! as f32, so a round trip is exact for data that is already f32-representable
//! and rounds to nearest otherwise. Header scalars keep full f64 precision.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::field::{FieldConfig, FieldModel, OutputMap};
use crate::geometry::ScanGeometry;
use crate::projector::ProjectionSet;
use crate::trainer::PriorSource;
use crate::volume::{PriorMode, Volume};

pub const VOLUME_MAGIC: &str = "RHOTOMO-VOL 1";
pub const PROJECTION_MAGIC: &str = "RHOTOMO-PRJ 1";
pub const CHECKPOINT_MAGIC: &str = "RHOTOMO-CKPT 1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

/// Ordered `key: value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        self.push(key, joined);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Header, String> {
        let mut h = Header::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| format!("line {}: expected 'key: value'", n + 1))?;
            h.entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(h)
    }
}

/// Typed access to a parsed header, with errors tagged by file.
struct Reader<'a> {
    header: &'a Header,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, msg: impl Into<String>) -> IoError {
        IoError::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn str(&self, key: &str) -> Result<&str, IoError> {
        self.header.get(key).ok_or_else(|| self.err(format!("missing key '{key}'")))
    }

    fn value<T: std::str::FromStr>(&self, key: &str) -> Result<T, IoError> {
        let raw = self.str(key)?;
        raw.parse().map_err(|_| self.err(format!("bad value for '{key}': '{raw}'")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, IoError> {
        self.str(key)?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| self.err(format!("bad entry in '{key}': '{s}'"))))
            .collect()
    }

    fn triple<T: std::str::FromStr + Copy>(&self, key: &str) -> Result<[T; 3], IoError> {
        let v: Vec<T> = self.list(key)?;
        v.try_into().map_err(|_| self.err(format!("'{key}' needs 3 values")))
    }

    fn expect(&self, key: &str, want: &str) -> Result<(), IoError> {
        let got = self.str(key)?;
        if got != want {
            return Err(self.err(format!("'{key}' is '{got}', expected '{want}'")));
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Payload path for a header path: same stem, `.raw` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn to_f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn write_pair(path: &Path, mut header: Header, values: &[f64]) -> Result<(), IoError> {
    let payload = payload_path(path);
    let name = payload
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| IoError::Format {
            path: path.to_path_buf(),
            msg: "header path needs a UTF-8 file name".into(),
        })?
        .to_string();
    header.push("byte_order", "little-endian");
    header.push("dtype", "f32");
    header.push("data_file", name);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&payload, to_f32_bytes(values)).map_err(io_err(&payload))?;
    fs::write(path, header.render()).map_err(io_err(path))
}

fn read_pair(path: &Path, magic: &str, expected_len: impl FnOnce(&Reader) -> Result<usize, IoError>) -> Result<(Header, Vec<f64>), IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header = Header::parse(&text).map_err(|msg| IoError::Format {
        path: path.to_path_buf(),
        msg,
    })?;
    let r = Reader { header: &header, path };
    r.expect("magic", magic)?;
    r.expect("byte_order", "little-endian")?;
    r.expect("dtype", "f32")?;
    let len = expected_len(&r)?;
    let payload = path.parent().unwrap_or(Path::new("")).join(r.str("data_file")?);
    let bytes = fs::read(&payload).map_err(io_err(&payload))?;
    if bytes.len() != 4 * len {
        return Err(IoError::Format {
            path: payload,
            msg: format!("expected {} bytes, found {}", 4 * len, bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, values))
}

/// Min and max of the stored (f32-rounded) values.
fn stored_range(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        let v = v as f32 as f64;
        (lo.min(v), hi.max(v))
    })
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<(), IoError> {
    let mut h = Header::default();
    h.push("magic", VOLUME_MAGIC);
    h.push_list("dims", &vol.dims);
    h.push_list("spacing", &vol.spacing);
    h.push_list("origin", &vol.origin);
    let (lo, hi) = stored_range(&vol.data);
    h.push("value_min", lo);
    h.push("value_max", hi);
    write_pair(path, h, &vol.data)
}

pub fn read_volume(path: &Path) -> Result<Volume, IoError> {
    let mut dims = [0; 3];
    let (header, data) = read_pair(path, VOLUME_MAGIC, |r| {
        dims = r.triple("dims")?;
        Ok(dims.iter().product())
    })?;
    let r = Reader { header: &header, path };
    Ok(Volume {
        dims,
        spacing: r.triple("spacing")?,
        origin: r.triple("origin")?,
        data,
    })
}

fn push_geometry(h: &mut Header, g: &ScanGeometry) {
    h.push("views", g.num_views());
    h.push("det_rows", g.det_rows);
    h.push("det_cols", g.det_cols);
    h.push("det_spacing_u", g.det_spacing_u);
    h.push("det_spacing_v", g.det_spacing_v);
    h.push("dso", g.dso);
    h.push("dsd", g.dsd);
    h.push_list("vol_dims", &g.vol_dims);
    h.push_list("vol_spacing", &g.vol_spacing);
    h.push_list("angles", &g.angles);
}

fn read_geometry(r: &Reader) -> Result<ScanGeometry, IoError> {
    let g = ScanGeometry {
        dso: r.value("dso")?,
        dsd: r.value("dsd")?,
        det_rows: r.value("det_rows")?,
        det_cols: r.value("det_cols")?,
        det_spacing_u: r.value("det_spacing_u")?,
        det_spacing_v: r.value("det_spacing_v")?,
        vol_dims: r.triple("vol_dims")?,
        vol_spacing: r.triple("vol_spacing")?,
        angles: r.list("angles")?,
    };
    let views: usize = r.value("views")?;
    if views != g.angles.len() {
        return Err(r.err(format!("views = {views} but {} angles listed", g.angles.len())));
    }
    g.validate().map_err(|e| r.err(e.to_string()))?;
    Ok(g)
}

pub fn write_projections(path: &Path, proj: &ProjectionSet) -> Result<(), IoError> {
    let mut h = Header::default();
    h.push("magic", PROJECTION_MAGIC);
    push_geometry(&mut h, &proj.geom);
    write_pair(path, h, &proj.images)
}

pub fn read_projections(path: &Path) -> Result<ProjectionSet, IoError> {
    let mut geom = None;
    let (_, images) = read_pair(path, PROJECTION_MAGIC, |r| {
        let g = read_geometry(r)?;
        let n = g.num_views() * g.pixels_per_view();
        geom = Some(g);
        Ok(n)
    })?;
    Ok(ProjectionSet {
        geom: geom.expect("set by the length callback"),
        images,
    })
}

/// A trained field plus what is needed to query it again: the volume box
/// that positions are normalized against and how the prior is read.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FieldModel,
    pub vol_dims: [usize; 3],
    pub vol_spacing: [f64; 3],
    pub prior_source: PriorSource,
    pub prior_mode: PriorMode,
}

impl Checkpoint {
    /// True if `geom` describes the same volume box.
    pub fn matches(&self, geom: &ScanGeometry) -> bool {
        self.vol_dims == geom.vol_dims && self.vol_spacing == geom.vol_spacing
    }
}

fn parse_prior_source(s: &str) -> Option<PriorSource> {
    [PriorSource::Fdk, PriorSource::Cgls, PriorSource::None]
        .into_iter()
        .find(|p| p.name() == s)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let c = &ckpt.model.config;
    let mut h = Header::default();
    h.push("magic", CHECKPOINT_MAGIC);
    h.push_list("vol_dims", &ckpt.vol_dims);
    h.push_list("vol_spacing", &ckpt.vol_spacing);
    h.push("prior_source", ckpt.prior_source.name());
    h.push("prior_mode", ckpt.prior_mode.name());
    h.push("field.levels", c.levels);
    h.push("field.table_size_log2", c.table_size_log2);
    h.push("field.features_per_level", c.features_per_level);
    h.push("field.base_resolution", c.base_resolution);
    h.push("field.per_level_scale", c.per_level_scale);
    h.push("field.prior_width", c.prior_width);
    h.push("field.hidden_layers", c.hidden_layers);
    h.push("field.hidden_width", c.hidden_width);
    h.push("field.output_map", c.output_map.name());
    h.push("field.output_bias_init", c.output_bias_init);
    h.push("field.prior_init_scale", c.prior_init_scale);
    h.push("num_params", ckpt.model.num_params());
    for slot in ckpt.model.layout() {
        let shape = slot.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        h.push(&format!("param.{}", slot.name), format!("{} {}", slot.offset, shape));
    }
    write_pair(path, h, &ckpt.model.params)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let mut parsed = None;
    let (header, params) = read_pair(path, CHECKPOINT_MAGIC, |r| {
        let output_map = match r.str("field.output_map")? {
            "softplus" => OutputMap::Softplus,
            "relu" => OutputMap::Relu,
            other => return Err(r.err(format!("unknown output map '{other}'"))),
        };
        let cfg = FieldConfig {
            levels: r.value("field.levels")?,
            table_size_log2: r.value("field.table_size_log2")?,
            features_per_level: r.value("field.features_per_level")?,
            base_resolution: r.value("field.base_resolution")?,
            per_level_scale: r.value("field.per_level_scale")?,
            prior_width: r.value("field.prior_width")?,
            hidden_layers: r.value("field.hidden_layers")?,
            hidden_width: r.value("field.hidden_width")?,
            output_map,
            output_bias_init: r.value("field.output_bias_init")?,
            prior_init_scale: r.value("field.prior_init_scale")?,
        };
        let n: usize = r.value("num_params")?;
        parsed = Some(cfg);
        Ok(n)
    })?;
    let r = Reader { header: &header, path };
    let cfg = parsed.expect("set by the length callback");
    let model = FieldModel::from_params(cfg, params).map_err(|e| r.err(e.to_string()))?;
    for slot in model.layout() {
        let key = format!("param.{}", slot.name);
        let shape = slot.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let want = format!("{} {}", slot.offset, shape);
        if r.str(&key)? != want {
            return Err(r.err(format!("layout entry '{key}' disagrees with the configuration")));
        }
    }
    let source = r.str("prior_source")?;
    Ok(Checkpoint {
        vol_dims: r.triple("vol_dims")?,
        vol_spacing: r.triple("vol_spacing")?,
        prior_source: parse_prior_source(source).ok_or_else(|| r.err(format!("unknown prior source '{source}'")))?,
        prior_mode: r.str("prior_mode")?.parse().map_err(|e: String| r.err(e))?,
        model,
    })
}
