use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{conv1d_out_len, conv_transpose_out_len};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sim,
    Gim,
    Cpc,
    Supervised,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Sim, Variant::Gim, Variant::Cpc, Variant::Supervised];

    /// Gaussian heads with reparametrized sampling.
    pub fn is_stochastic(self) -> bool {
        self == Variant::Sim
    }

    /// Each module has its own loss and stops gradients at its input.
    pub fn is_greedy(self) -> bool {
        matches!(self, Variant::Sim | Variant::Gim)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sim => "sim",
            Variant::Gim => "gim",
            Variant::Cpc => "cpc",
            Variant::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sim" => Ok(Variant::Sim),
            "gim" => Ok(Variant::Gim),
            "cpc" => Ok(Variant::Cpc),
            "supervised" => Ok(Variant::Supervised),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    pub fn out_len(&self, l: usize) -> Option<usize> {
        conv1d_out_len(l, self.kernel, self.stride, self.padding)
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.kernel, self.stride, self.padding)
    }
}

pub fn default_module_specs() -> Vec<Vec<ConvSpec>> {
    vec![
        vec![ConvSpec::new(10, 5, 2), ConvSpec::new(8, 4, 2)],
        vec![ConvSpec::new(4, 2, 2), ConvSpec::new(4, 2, 2)],
        vec![ConvSpec::new(4, 2, 1)],
    ]
}

/// `"10/5/2,8/4/2;4/2/2,4/2/2;4/2/1"`: modules separated by `;`, convs by `,`.
pub fn format_module_specs(specs: &[Vec<ConvSpec>]) -> String {
    specs
        .iter()
        .map(|m| m.iter().map(ConvSpec::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_module_specs(s: &str) -> Result<Vec<Vec<ConvSpec>>> {
    let bad = || Error::Config(format!("malformed module specs `{s}`"));
    s.split(';')
        .map(|m| {
            m.split(',')
                .map(|c| {
                    let v: Vec<usize> = c.trim().split('/').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    match v[..] {
                        [k, st, p] if k > 0 && st > 0 => Ok(ConvSpec::new(k, st, p)),
                        _ => Err(bad()),
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub gru_dim: usize,
    pub modules: Vec<Vec<ConvSpec>>,
    pub k: usize,
    pub beta: f64,
    pub seed: u64,
    /// Output classes of the supervised baseline's head.
    pub classes: usize,
}

pub const FULL_CLIP_LEN: usize = 10_240;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sim,
            channels: 512,
            gru_dim: 256,
            modules: default_module_specs(),
            k: 10,
            beta: 0.01,
            seed: 0,
            classes: 9,
        }
    }
}

impl ModelConfig {
    pub fn full(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Same kernels and strides with 64 channels and a 64-unit GRU.
    pub fn reduced(variant: Variant) -> Self {
        Self {
            variant,
            channels: 64,
            gru_dim: 64,
            ..Self::default()
        }
    }

    pub fn n_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.gru_dim == 0 {
            return Err(Error::Config("channels and gru_dim must be positive".into()));
        }
        if self.modules.is_empty() || self.modules.iter().any(Vec::is_empty) {
            return Err(Error::Config("every module needs at least one conv".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be a finite non-negative number, got {}", self.beta)));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Frame count after each conv of each module for an input of `l`
    /// samples; `None` when the input is too short.
    pub fn length_chain(&self, l: usize) -> Option<Vec<Vec<usize>>> {
        let mut cur = l;
        self.modules
            .iter()
            .map(|m| {
                m.iter()
                    .map(|c| {
                        cur = c.out_len(cur)?;
                        Some(cur)
                    })
                    .collect()
            })
            .collect()
    }

    /// Frames produced by each module.
    pub fn module_frames(&self, l: usize) -> Option<Vec<usize>> {
        Some(self.length_chain(l)?.iter().map(|m| *m.last().expect("non-empty module")).collect())
    }

    pub fn downsampling(&self) -> usize {
        self.modules.iter().flatten().map(|c| c.stride).product()
    }

    pub fn module_input_channels(&self, m: usize) -> usize {
        if m == 0 {
            1
        } else {
            self.channels
        }
    }
}

/// Output padding that makes a transposed conv map `l_out` back to `l_in`.
pub fn inverse_output_padding(spec: &ConvSpec, l_in: usize, l_out: usize) -> Result<usize> {
    let base = conv_transpose_out_len(l_out, spec.kernel, spec.stride, spec.padding, 0)
        .ok_or_else(|| Error::Config(format!("conv {spec} cannot be inverted from {l_out} frames")))?;
    if l_in < base || l_in - base >= spec.stride {
        return Err(Error::Config(format!(
            "conv {spec}: {l_out} frames cannot be mapped back to {l_in}"
        )));
    }
    Ok(l_in - base)
}
