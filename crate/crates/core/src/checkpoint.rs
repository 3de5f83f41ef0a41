//! Versioned plain-text checkpoints.
//!
//! Floats are written as the hex of their IEEE-754 bits so a save/load cycle
//! is bit-exact. Layout:
//!
//! ```text
//! traverse-checkpoint 1
//! seed <u64>
//! epoch <usize>
//! config <line count>
//! <config lines>
//! tensor <name> <d0>x<d1>x... <hex> <hex> ...
//! running <layer> <hex mean...> | <hex var...>
//! adam <step>
//! moment <index> <hex m...> | <hex v...>
//! end
//! ```

use crate::config::Config;
use crate::engine::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

const MAGIC: &str = "traverse-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration that produced the parameters, echoed verbatim.
    pub config: Config,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<(String, Tensor)>,
    /// Running mean and variance per normalized layer.
    pub running: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(config: &Config, seed: u64, epoch: usize, params: &ModelParams, adam: Option<&AdamState>) -> Self {
        let running = params
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.norm.as_ref().map(|n| (i, n.running_mean.clone(), n.running_var.clone())))
            .collect();
        Checkpoint {
            config: config.clone(),
            seed,
            epoch,
            tensors: params.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            running,
            adam: adam.cloned(),
        }
    }

    /// Copies stored values into `params`, which must have the same layout.
    pub fn restore(&self, params: &mut ModelParams) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, shape), (cname, ct)) in names.iter().zip(&self.tensors) {
            if name != cname || shape.as_slice() != ct.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {cname} {:?} does not match model tensor {name} {shape:?}",
                    ct.shape()
                )));
            }
        }
        for (dst, (_, src)) in params.tensors_mut().into_iter().zip(&self.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        for (layer, mean, var) in &self.running {
            let norm = params
                .layers
                .get_mut(*layer)
                .and_then(|b| b.norm.as_mut())
                .ok_or_else(|| Error::Contract(format!("layer {layer} has no normalization")))?;
            if norm.running_mean.len() != mean.len() || norm.running_var.len() != var.len() {
                return Err(Error::Contract(format!("running statistics of layer {layer} have the wrong size")));
            }
            norm.running_mean.copy_from_slice(mean);
            norm.running_var.copy_from_slice(var);
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\nseed {}\nepoch {}\n", self.seed, self.epoch);
        let cfg = self.config.to_string();
        out.push_str(&format!("config {}\n{cfg}", cfg.lines().count()));
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("tensor {name} {} {}\n", dims.join("x"), hex(t.data())));
        }
        for (layer, mean, var) in &self.running {
            out.push_str(&format!("running {layer} {} | {}\n", hex(mean), hex(var)));
        }
        if let Some(a) = &self.adam {
            out.push_str(&format!("adam {}\n", a.step));
            for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
                out.push_str(&format!("moment {i} {} | {}\n", hex(m.data()), hex(v.data())));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |i: usize, msg: &str| Error::ingest(i + 1, format!("checkpoint: {msg}"));
        let header = lines.first().ok_or_else(|| bad(0, "empty file"))?;
        match header.split_once(' ') {
            Some((MAGIC, v)) if v.parse() == Ok(VERSION) => {}
            Some((MAGIC, v)) => return Err(bad(0, &format!("unsupported version {v}"))),
            _ => return Err(bad(0, "not a checkpoint")),
        }
        let field = |i: usize, key: &str| -> Result<&str> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(i, &format!("expected `{key}`")))
        };
        let seed = field(1, "seed")?.parse().map_err(|_| bad(1, "bad seed"))?;
        let epoch = field(2, "epoch")?.parse().map_err(|_| bad(2, "bad epoch"))?;
        let n_cfg: usize = field(3, "config")?.parse().map_err(|_| bad(3, "bad config length"))?;
        if lines.len() < 4 + n_cfg {
            return Err(bad(3, "truncated config"));
        }
        let config = Config::parse(&lines[4..4 + n_cfg].join("\n"))?;

        let mut tensors = Vec::new();
        let mut running = Vec::new();
        let mut adam: Option<AdamState> = None;
        let mut ended = false;
        for (i, line) in lines.iter().enumerate().skip(4 + n_cfg) {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("tensor"), Some(name), Some(rest)) => {
                    let (dims, values) = rest.split_once(' ').unwrap_or((rest, ""));
                    let shape: Vec<usize> = dims
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad(i, "bad tensor shape")))
                        .collect::<Result<_>>()?;
                    let data = unhex(values).map_err(|m| bad(i, &m))?;
                    let t = Tensor::new(&shape, data).map_err(|_| bad(i, "tensor size does not match shape"))?;
                    tensors.push((name.to_string(), t));
                }
                (Some("running"), Some(layer), Some(rest)) => {
                    let layer = layer.parse().map_err(|_| bad(i, "bad layer index"))?;
                    let (m, v) = rest.split_once(" | ").ok_or_else(|| bad(i, "expected `mean | var`"))?;
                    running.push((layer, unhex(m).map_err(|e| bad(i, &e))?, unhex(v).map_err(|e| bad(i, &e))?));
                }
                (Some("adam"), Some(step), None) => {
                    adam = Some(AdamState {
                        step: step.parse().map_err(|_| bad(i, "bad adam step"))?,
                        m: Vec::new(),
                        v: Vec::new(),
                    });
                }
                (Some("moment"), Some(idx), Some(rest)) => {
                    let state = adam.as_mut().ok_or_else(|| bad(i, "moment before adam header"))?;
                    let idx: usize = idx.parse().map_err(|_| bad(i, "bad moment index"))?;
                    let shape = tensors
                        .get(idx)
                        .map(|(_, t)| t.shape().to_vec())
                        .ok_or_else(|| bad(i, "moment without matching tensor"))?;
                    if idx != state.m.len() {
                        return Err(bad(i, "moments out of order"));
                    }
                    let (m, v) = rest.split_once(" | ").ok_or_else(|| bad(i, "expected `m | v`"))?;
                    let mk = |s: &str| -> Result<Tensor> {
                        Tensor::new(&shape, unhex(s).map_err(|e| bad(i, &e))?).map_err(|_| bad(i, "moment size mismatch"))
                    };
                    state.m.push(mk(m)?);
                    state.v.push(mk(v)?);
                }
                (Some("end"), None, None) => {
                    ended = true;
                    break;
                }
                _ => return Err(bad(i, "unrecognized line")),
            }
        }
        if !ended {
            return Err(bad(lines.len(), "missing `end`"));
        }
        if let Some(a) = &adam {
            if a.m.len() != tensors.len() {
                return Err(bad(lines.len(), "optimizer moments do not cover every tensor"));
            }
        }
        Ok(Checkpoint {
            config,
            seed,
            epoch,
            tensors,
            running,
            adam,
        })
    }
}

fn hex(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
    parts.join(" ")
}

fn unhex(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split_whitespace()
        .map(|h| {
            u64::from_str_radix(h, 16)
                .map(f64::from_bits)
                .map_err(|_| format!("bad float bits `{h}`"))
        })
        .collect()
}
