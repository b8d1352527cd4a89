use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::{Element, Tape, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
}

impl UNetConfig {
    /// Desk-scale network: three downsamplings, widths 16..128.
    pub fn desk(in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            depth: 3,
            encoder_widths: vec![16, 32, 64, 128],
            decoder_widths: vec![64, 32, 16],
        }
    }

    /// Five downsamplings with decoder widths 256..16.
    pub fn full_scale(in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            depth: 5,
            encoder_widths: vec![32, 64, 128, 256, 512, 512],
            decoder_widths: vec![256, 128, 64, 32, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModelConfig(m));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.encoder_widths.len() != self.depth + 1 {
            return bad(format!(
                "{} encoder widths for depth {}; need {}",
                self.encoder_widths.len(),
                self.depth,
                self.depth + 1
            ));
        }
        if self.decoder_widths.len() != self.depth {
            return bad(format!(
                "{} decoder widths for depth {}; need {}",
                self.decoder_widths.len(),
                self.depth,
                self.depth
            ));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return bad("all widths must be >= 1".into());
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.in_channels;
        for (l, &w) in self.encoder_widths.iter().enumerate() {
            conv(format!("enc{l}.conv1"), cin, w, 3);
            conv(format!("enc{l}.conv2"), w, w, 3);
            cin = w;
        }
        for (i, &w) in self.decoder_widths.iter().enumerate() {
            let skip = self.encoder_widths[self.depth - 1 - i];
            conv(format!("dec{i}.conv1"), cin + skip, w, 3);
            conv(format!("dec{i}.conv2"), w, w, 3);
            cin = w;
        }
        conv("head".into(), cin, 1, 1);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    params: Vec<Param<T>>,
}

impl<T: Element> UNet<T> {
    /// Kaiming fan-in normal weights, zero biases; parameter `i` draws from
    /// its own stream derived from `seed`.
    pub fn init(config: UNetConfig, seed: u64) -> Result<UNet<T>> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let len = shape.iter().product();
                let data = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let mut rng = seed::rng(seed, &[seed::hash_str("init"), i as u64]);
                    (0..len)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::from_f64(z * std)
                        })
                        .collect()
                } else {
                    vec![T::ZERO; len]
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(UNet { config, params })
    }

    pub fn zeros(config: UNetConfig) -> Result<UNet<T>> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                Param {
                    name,
                    shape,
                    data: vec![T::ZERO; len],
                }
            })
            .collect();
        Ok(UNet { config, params })
    }

    /// Builds a model from explicit parameters, checking names and shapes.
    pub fn from_params(config: UNetConfig, params: Vec<Param<T>>) -> Result<UNet<T>> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
        }
        Ok(UNet { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(Error::ShapeMismatch(format!("U-Net input must be 4-D, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "U-Net expects {} channels, input has {c}",
                self.config.in_channels
            )));
        }
        let depth = self.config.depth;
        let unit = 1usize << depth;
        if h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
            return Err(Error::IndivisibleSpatialDims {
                height: h,
                width: w,
                depth,
            });
        }
        Ok(())
    }

    /// Pushes parameters onto `tape` and runs the network on `x[B,N,H,W]`.
    /// Returns the `[B,1,H,W]` logits and the parameter handles in order.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.shape(x))?;
        let mut pv = Vec::with_capacity(self.params.len());
        for p in &self.params {
            pv.push(tape.leaf(&p.shape, p.data.clone(), train)?);
        }
        let logits = self.forward_with(tape, x, &pv)?;
        Ok((logits, pv))
    }

    /// Runs the network with parameters already on `tape`, in
    /// [`UNetConfig::param_shapes`] order.
    pub fn forward_with(&self, tape: &mut Tape<T>, x: Var, pv: &[Var]) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        if pv.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter handles for {} parameters",
                pv.len(),
                self.params.len()
            )));
        }
        let depth = self.config.depth;
        let mut next = pv.iter().copied();
        let mut conv = |tape: &mut Tape<T>, h: Var, relu: bool| -> Result<Var> {
            let (wv, bv) = (next.next().unwrap(), next.next().unwrap());
            let y = tape.conv2d(h, wv, bv)?;
            Ok(if relu { tape.relu(y) } else { y })
        };

        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for l in 0..=depth {
            if l > 0 {
                h = tape.maxpool2(h)?;
            }
            h = conv(tape, h, true)?;
            h = conv(tape, h, true)?;
            if l < depth {
                skips.push(h);
            }
        }
        for _ in 0..depth {
            let up = tape.upsample2(h)?;
            h = tape.concat(up, skips.pop().unwrap())?;
            h = conv(tape, h, true)?;
            h = conv(tape, h, true)?;
        }
        conv(tape, h, false)
    }

    /// Logits for a batch without recording gradients.
    pub fn logits(&self, x: &[T], shape: [usize; 4]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(&shape, x.to_vec(), false)?;
        let (out, _) = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(out).to_vec())
    }
}
