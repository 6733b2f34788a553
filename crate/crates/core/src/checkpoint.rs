//! Binary weight files.
//!
//! Layout: `SLCW`, little-endian u32 version (1), u32 tensor count; per
//! tensor a u16 name length, the UTF-8 name, u8 rank, `rank` u32 dims and
//! row-major f32 values. Parameters and batch-norm buffers are both stored.
//! The model configuration travels in a `<file>.cfg` text sidecar.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use slc_tensor::{Module, Param, ParamVisitor, Real, Tensor};

use crate::error::{CoreError, Result};
use crate::network::{ModelConfig, Slcnet};

pub const MAGIC: &[u8; 4] = b"SLCW";
pub const VERSION: u32 = 1;

/// Named tensors in visit order.
pub type State = Vec<(String, Tensor<f64>)>;

/// Every parameter and buffer of `model`, widened to f64.
pub fn collect_state<T: Real>(model: &mut dyn Module<T>) -> State {
    struct Collect(State);
    impl<T: Real> ParamVisitor<T> for Collect {
        fn param(&mut self, name: &str, p: &mut Param<T>) {
            self.0.push((name.to_string(), p.value.cast()));
        }
        fn buffer(&mut self, name: &str, v: &mut Tensor<T>) {
            self.0.push((name.to_string(), v.cast()));
        }
    }
    let mut c = Collect(Vec::new());
    model.visit("", &mut c);
    c.0
}

/// What [`apply_state`] matched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Model entries absent from the state.
    pub missing: Vec<String>,
    /// State entries the model does not have.
    pub unexpected: Vec<String>,
}

/// Copy tensors into `model` by name. With `strict`, any missing or
/// unexpected name is an error; otherwise they are reported. A shape
/// mismatch is always an error.
pub fn apply_state<T: Real>(model: &mut dyn Module<T>, state: &State, strict: bool) -> Result<LoadReport> {
    struct Apply<'a> {
        by_name: HashMap<&'a str, &'a Tensor<f64>>,
        report: LoadReport,
        error: Option<String>,
    }
    impl Apply<'_> {
        fn take<T: Real>(&mut self, name: &str, dst: &mut Tensor<T>) {
            match self.by_name.remove(name) {
                Some(src) if src.shape() == dst.shape() => {
                    *dst = src.cast();
                    self.report.loaded += 1;
                }
                Some(src) => {
                    self.error.get_or_insert(format!("{name}: stored shape {:?}, model shape {:?}", src.shape(), dst.shape()));
                }
                None => self.report.missing.push(name.to_string()),
            }
        }
    }
    impl<T: Real> ParamVisitor<T> for Apply<'_> {
        fn param(&mut self, name: &str, p: &mut Param<T>) {
            self.take(name, &mut p.value);
        }
        fn buffer(&mut self, name: &str, v: &mut Tensor<T>) {
            self.take(name, v);
        }
    }
    let mut apply = Apply {
        by_name: state.iter().map(|(n, t)| (n.as_str(), t)).collect(),
        report: LoadReport::default(),
        error: None,
    };
    model.visit("", &mut apply);
    if let Some(e) = apply.error {
        return Err(CoreError::Checkpoint(e));
    }
    let mut report = apply.report;
    report.unexpected = state
        .iter()
        .map(|(n, _)| n)
        .filter(|n| apply.by_name.contains_key(n.as_str()))
        .cloned()
        .collect();
    if strict && (!report.missing.is_empty() || !report.unexpected.is_empty()) {
        return Err(CoreError::Checkpoint(format!(
            "names differ: missing {:?}, unexpected {:?}",
            report.missing, report.unexpected
        )));
    }
    Ok(report)
}

pub fn encode_state(state: &State) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| CoreError::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| CoreError::Checkpoint(format!("rank too high: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(CoreError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_state(data: &[u8]) -> Result<State> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut state = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| CoreError::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(&dims, values).map_err(|e| CoreError::Checkpoint(format!("{name}: {e}")))?;
        state.push((name, t));
    }
    if c.pos != data.len() {
        return Err(CoreError::Checkpoint(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok(state)
}

pub fn save_state(path: impl AsRef<Path>, state: &State) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_state(state)?;
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<State> {
    let path = path.as_ref();
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| CoreError::io(path, e))?;
    decode_state(&data)
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn format_config(config: &ModelConfig) -> String {
    config.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value", i + 1)))?;
        if !config.set(k.trim(), v.trim())? {
            return Err(CoreError::Config(format!("line {}: unknown key `{}`", i + 1, k.trim())));
        }
    }
    config.validate()?;
    Ok(config)
}

/// Weights plus the configuration sidecar.
pub fn save_model<T: Real>(path: impl AsRef<Path>, model: &mut Slcnet<T>) -> Result<()> {
    let path = path.as_ref();
    save_state(path, &collect_state(model))?;
    let cfg = config_path(path);
    fs::write(&cfg, format_config(&model.config)).map_err(|e| CoreError::io(&cfg, e))
}

/// Rebuild a model from its sidecar configuration and load every tensor.
pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Slcnet<T>> {
    let path = path.as_ref();
    let cfg = config_path(path);
    let text = fs::read_to_string(&cfg).map_err(|e| CoreError::io(&cfg, e))?;
    let mut model = Slcnet::new(parse_model_config(&text)?)?;
    apply_state(&mut model, &load_state(path)?, true)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let state = vec![("a".to_string(), Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap())];
        let bytes = encode_state(&state).unwrap();
        let mut expect = b"SLCW".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u16.to_le_bytes());
        expect.push(b'a');
        expect.push(1);
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(decode_state(&bytes).unwrap(), state);
        assert!(decode_state(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn partial_load_reports_names() {
        let mut model = Slcnet::<f32>::new(ModelConfig {
            fcsm_scales: vec![],
            arfe_scales: vec![],
            ..ModelConfig::default()
        })
        .unwrap();
        let mut state = collect_state(&mut model);
        state.retain(|(n, _)| n.starts_with("backbone"));
        state.push(("extra.weight".into(), Tensor::zeros(&[1])));
        let report = apply_state(&mut model, &state, false).unwrap();
        assert_eq!(report.unexpected, vec!["extra.weight".to_string()]);
        assert!(!report.missing.is_empty() && report.loaded == state.len() - 1);
        assert!(apply_state(&mut model, &state, true).is_err());
    }
}
