use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdm_tensor::{Tape, Tensor, Var};

use super::DenoiserConfig;
use crate::error::{Result, TsdmError};

/// Ordered, uniquely named weights of the noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize, zero: bool) {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform(c_in * k)
        };
        self.push(format!("{prefix}.w"), vec![c_out, c_in, k], init);
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform(c_in * k)
        };
        self.push(format!("{prefix}.b"), vec![c_out], init);
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.push(
            format!("{prefix}.w"),
            vec![d_in, d_out],
            Init::Uniform(d_in),
        );
        self.push(format!("{prefix}.b"), vec![1, d_out], Init::Uniform(d_in));
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.g"), vec![c], Init::Ones);
        self.push(format!("{prefix}.b"), vec![c], Init::Zeros);
    }

    fn res_block(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.norm(&format!("{prefix}.n1"), c_in);
        self.conv(&format!("{prefix}.c1"), c_out, c_in, k, false);
        self.norm(&format!("{prefix}.n2"), c_out);
        self.conv(&format!("{prefix}.c2"), c_out, c_out, k, false);
        if c_in != c_out {
            self.conv(&format!("{prefix}.skip"), c_out, c_in, 1, false);
        }
    }
}

/// Parameter names, shapes and initializers implied by a configuration, in
/// storage order. The forward pass looks tensors up by these names.
pub(crate) fn layout(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let (k, e, h) = (cfg.kernel, cfg.time_embed_dim, cfg.time_hidden());
    b.linear("temb.l1", e, h);
    b.linear("temb.l2", h, h);
    b.conv("in", cfg.base_width, cfg.channels_in, k, false);

    let mut width = cfg.base_width;
    for d in 0..cfg.depth {
        let c = cfg.stage_width(d);
        b.linear(&format!("enc{d}.temb"), h, c);
        b.res_block(&format!("enc{d}.res0"), width, c, k);
        b.res_block(&format!("enc{d}.res1"), c, c, k);
        b.conv(&format!("enc{d}.down"), c, c, k, false);
        width = c;
    }

    b.linear("mid.temb", h, width);
    b.res_block("mid.res0", width, width, k);
    b.norm("mid.attn.n", width);
    for proj in ["q", "k", "v", "o"] {
        b.push(
            format!("mid.attn.{proj}"),
            vec![width, width],
            Init::Uniform(width),
        );
    }
    b.res_block("mid.res1", width, width, k);

    for d in (0..cfg.depth).rev() {
        let c = cfg.stage_width(d);
        b.linear(&format!("dec{d}.temb"), h, c);
        b.res_block(&format!("dec{d}.res0"), width + c, c, k);
        b.res_block(&format!("dec{d}.res1"), c, c, k);
        width = c;
    }

    b.norm("out.n", width);
    b.conv("out", cfg.channels_in, width, k, true);
    b.specs
}

impl DenoiserParams {
    /// Fresh weights for `cfg`, reproducible from `seed`. The output
    /// convolution starts at zero so the untrained network predicts no noise.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(cfg)
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Zeros => Tensor::zeros(spec.shape),
                    Init::Ones => Tensor::ones(spec.shape),
                    Init::Uniform(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(spec.shape, |_| rng.random_range(-bound..bound))
                    }
                };
                (spec.name, t)
            })
            .collect();
        Ok(Self::from_entries_unchecked(entries))
    }

    /// Validates that `entries` has exactly the layout of `cfg` (names,
    /// order and shapes) and that every value is finite.
    pub fn from_entries(cfg: &DenoiserConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        if specs.len() != entries.len() {
            return Err(TsdmError::invalid(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                entries.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&entries) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(TsdmError::invalid(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            if !t.is_finite() {
                return Err(TsdmError::invalid(format!(
                    "parameter {name} is not finite"
                )));
            }
        }
        Ok(Self::from_entries_unchecked(entries))
    }

    fn from_entries_unchecked(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        Self { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }
}

/// Parameters placed on a tape, addressable by name.
pub(crate) struct Bound<'a> {
    params: &'a DenoiserParams,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} missing from layout"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn layout_names_are_unique() {
        let specs = layout(&DenoiserConfig::default());
        let names: HashSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn init_is_seeded_and_validated() {
        let cfg = DenoiserConfig::default();
        let a = DenoiserParams::init(&cfg, 1).unwrap();
        assert_eq!(a, DenoiserParams::init(&cfg, 1).unwrap());
        assert_ne!(a, DenoiserParams::init(&cfg, 2).unwrap());
        assert!(a.get("out.w").unwrap().data().iter().all(|&v| v == 0.0));

        let mut entries: Vec<_> = a.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert!(DenoiserParams::from_entries(&cfg, entries.clone()).is_ok());
        entries[0].1.data_mut()[0] = f64::NAN;
        assert!(DenoiserParams::from_entries(&cfg, entries.clone()).is_err());
        entries.swap(0, 1);
        assert!(DenoiserParams::from_entries(&cfg, entries).is_err());
    }
}
