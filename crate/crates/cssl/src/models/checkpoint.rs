//! Single-file checkpoints: a text manifest (task, epoch, architecture
//! lines, parameter table) followed by the raw parameter data as
//! little-endian 64-bit floats in declaration order.

use crate::params::ParamSet;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: checkpoint parse error at line {line}: {what}")]
    Parse { path: String, line: usize, what: String },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Detect,
    Flow,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Detect => "detect",
            TaskKind::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "detect" => Some(TaskKind::Detect),
            "flow" => Some(TaskKind::Flow),
            _ => None,
        }
    }
}

/// A loaded checkpoint. `arch` holds the model's own serialization lines
/// verbatim; the task decides which spec parser to hand them to.
#[derive(Debug)]
pub struct Checkpoint {
    pub task: TaskKind,
    pub epoch: usize,
    pub arch: Vec<String>,
    pub params: ParamSet,
}

pub fn save_checkpoint(
    path: &Path,
    task: TaskKind,
    epoch: usize,
    arch: &[String],
    params: &ParamSet,
) -> Result<(), CkptError> {
    let mut head = String::new();
    head.push_str("csslckpt v1\n");
    head.push_str(&format!("task {}\n", task.as_str()));
    head.push_str(&format!("epoch {epoch}\n"));
    for line in arch {
        head.push_str(&format!("arch {line}\n"));
    }
    head.push_str(&format!("params {}\n", params.len()));
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("param {name} {}\n", dims.join(" ")));
    }
    head.push_str("data\n");
    let mut buf = head.into_bytes();
    for (_, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let buf = fs::read(path)?;
    let perr = |line: usize, what: String| CkptError::Parse {
        path: path.display().to_string(),
        line,
        what,
    };

    // The manifest is every line up to and including "data"; the byte
    // offset just past it is where the float payload starts.
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut task = None;
    let mut epoch = 0usize;
    let mut arch = Vec::new();
    let mut decls: Vec<(String, Vec<usize>)> = Vec::new();
    let mut promised_params: Option<usize> = None;
    let mut in_data = false;
    while offset < buf.len() {
        let end = buf[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p)
            .unwrap_or(buf.len());
        let line = std::str::from_utf8(&buf[offset..end])
            .map_err(|_| perr(line_no + 1, "manifest is not UTF-8".into()))?;
        line_no += 1;
        offset = end + 1;
        if line_no == 1 {
            if line != "csslckpt v1" {
                return Err(perr(1, format!("bad header '{line}'")));
            }
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "task" => {
                task = Some(
                    TaskKind::parse(rest)
                        .ok_or_else(|| perr(line_no, format!("unknown task '{rest}'")))?,
                )
            }
            "epoch" => {
                epoch = rest
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad epoch '{rest}'")))?
            }
            "arch" => arch.push(rest.to_string()),
            "params" => {
                promised_params = Some(
                    rest.parse()
                        .map_err(|_| perr(line_no, format!("bad param count '{rest}'")))?,
                )
            }
            "param" => {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| perr(line_no, "param line without a name".into()))?
                    .to_string();
                let dims: Vec<usize> = parts
                    .map(|d| d.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| perr(line_no, format!("bad dims in '{line}'")))?;
                decls.push((name, dims));
            }
            "data" => {
                in_data = true;
                break;
            }
            _ => return Err(perr(line_no, format!("unknown manifest line '{line}'"))),
        }
    }
    if !in_data {
        return Err(perr(line_no, "manifest never reached its 'data' line".into()));
    }
    let task = task.ok_or_else(|| perr(line_no, "missing task line".into()))?;
    if let Some(n) = promised_params {
        if n != decls.len() {
            return Err(perr(
                line_no,
                format!("params line promises {n}, found {} declarations", decls.len()),
            ));
        }
    }

    let total: usize = decls.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    let expected = offset + 8 * total;
    if buf.len() != expected {
        return Err(CkptError::Mismatch(format!(
            "payload is {} bytes, manifest promises {}",
            buf.len() - offset,
            8 * total
        )));
    }
    let mut params = ParamSet::new();
    let mut pos = offset;
    for (name, dims) in decls {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        params.insert(&name, Tensor::new(dims, data).expect("length follows from dims"));
    }
    Ok(Checkpoint { task, epoch, arch, params })
}
