//! A compact 3D U-Net used as noise predictor and as segmenter.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use super::tape::{Conv3dLayer, GroupNormLayer, LinearLayer, Tape, Var};
use crate::diffusion::{Condition, DenoiserContract, NoisePredictor};
use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels of the tensor being predicted on (image channels plus any concatenated condition).
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Resolution levels; each level after the first halves every spatial dim.
    pub levels: usize,
    pub time_embedding: bool,
    /// Width of cross-attention context tokens, if conditioned.
    pub context_dim: Option<usize>,
    pub attn_dim: usize,
    pub groups: usize,
    /// Zero-initialise the output convolution.
    pub zero_init_output: bool,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidArgument(
                "U-Net widths must be positive".into(),
            ));
        }
        if self.levels == 0 || self.levels > 4 {
            return Err(Error::InvalidArgument(format!(
                "levels must be in 1..=4, got {}",
                self.levels
            )));
        }
        if self.groups == 0 || self.attn_dim == 0 {
            return Err(Error::InvalidArgument(
                "groups and attn_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this factor.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn time_dim(&self) -> usize {
        self.base_width * 2
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    groups: usize,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv3dLayer {
        let fan_in = (cin * k * k * k) as f32;
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform(libm::sqrtf(3.0 / fan_in))
        };
        let w = self.store.add(
            format!("{name}.w"),
            vec![cout, cin, k, k, k],
            init,
            self.rng,
        );
        let b = self
            .store
            .add(format!("{name}.b"), vec![cout], Init::Zeros, self.rng);
        Conv3dLayer { w, b, cin, cout, k }
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, zero: bool) -> LinearLayer {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform(libm::sqrtf(3.0 / inp as f32))
        };
        let w = self
            .store
            .add(format!("{name}.w"), vec![out, inp], init, self.rng);
        let b = self
            .store
            .add(format!("{name}.b"), vec![out], Init::Zeros, self.rng);
        LinearLayer { w, b, inp, out }
    }

    fn norm(&mut self, name: &str, channels: usize) -> GroupNormLayer {
        let gamma = self.store.add(
            format!("{name}.gamma"),
            vec![channels],
            Init::Ones,
            self.rng,
        );
        let beta = self.store.add(
            format!("{name}.beta"),
            vec![channels],
            Init::Zeros,
            self.rng,
        );
        GroupNormLayer {
            gamma,
            beta,
            channels,
            groups: gcd(self.groups, channels),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, tdim: Option<usize>) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            time: tdim.map(|t| self.linear(&format!("{name}.time"), t, cout, false)),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, channels: usize, ctx: usize, dim: usize) -> CrossAttn {
        CrossAttn {
            norm: self.norm(&format!("{name}.norm"), channels),
            q: self.linear(&format!("{name}.q"), channels, dim, false),
            k: self.linear(&format!("{name}.k"), ctx, dim, false),
            v: self.linear(&format!("{name}.v"), ctx, dim, false),
            out: self.linear(&format!("{name}.out"), dim, channels, true),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNormLayer,
    conv1: Conv3dLayer,
    time: Option<LinearLayer>,
    norm2: GroupNormLayer,
    conv2: Conv3dLayer,
    skip: Option<Conv3dLayer>,
}

impl ResBlock {
    fn forward(&self, tape: &mut Tape, x: Var, temb: Option<Var>) -> Var {
        let h = tape.group_norm(x, self.norm1);
        let h = tape.silu(h);
        let mut h = tape.conv3d(h, self.conv1);
        if let (Some(lin), Some(t)) = (self.time, temb) {
            let bias = tape.linear(t, lin);
            h = tape.add_channel_bias(h, bias);
        }
        let h = tape.group_norm(h, self.norm2);
        let h = tape.silu(h);
        let h = tape.conv3d(h, self.conv2);
        let skip = match self.skip {
            Some(c) => tape.conv3d(x, c),
            None => x,
        };
        tape.add(h, skip)
    }
}

#[derive(Debug, Clone)]
struct CrossAttn {
    norm: GroupNormLayer,
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    out: LinearLayer,
}

impl CrossAttn {
    fn forward(&self, tape: &mut Tape, x: Var, ctx: Var) -> Var {
        let h = tape.group_norm(x, self.norm);
        let rows = tape.to_rows(h);
        let q = tape.linear(rows, self.q);
        let k = tape.linear(ctx, self.k);
        let v = tape.linear(ctx, self.v);
        let a = tape.attention(q, k, v);
        let o = tape.linear(a, self.out);
        let o = tape.from_rows(o, x);
        tape.add(x, o)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<CrossAttn>,
}

/// Layer handles of a U-Net whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    conv_in: Conv3dLayer,
    time_mlp: Option<(LinearLayer, LinearLayer)>,
    down: Vec<Level>,
    mid: Level,
    up: Vec<Level>,
    norm_out: GroupNormLayer,
    conv_out: Conv3dLayer,
}

impl UNet {
    pub fn new(config: UNetConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store,
            rng,
            groups: config.groups,
        };
        let widths: Vec<usize> = (0..config.levels)
            .map(|l| config.base_width * (1 << l.min(2)))
            .collect();
        let tdim = config.time_embedding.then(|| config.time_dim() * 2);
        let time_mlp = config.time_embedding.then(|| {
            let e = config.time_dim();
            (
                b.linear("time.0", e, 2 * e, false),
                b.linear("time.1", 2 * e, 2 * e, false),
            )
        });
        let conv_in = b.conv("in", config.in_channels, widths[0], 3, false);
        let attn_at = |b: &mut Builder<_>, name: &str, c: usize, level: usize| {
            // Attention only below full resolution, where the token grid is small.
            match config.context_dim {
                Some(ctx) if level > 0 || config.levels == 1 => {
                    Some(b.attn(name, c, ctx, config.attn_dim))
                }
                _ => None,
            }
        };
        let mut down = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let res = b.res(&format!("down{l}"), prev, w, tdim);
            let attn = attn_at(&mut b, &format!("down{l}.attn"), w, l);
            down.push(Level { res, attn });
            prev = w;
        }
        let deepest = *widths.last().unwrap();
        let mid = Level {
            res: b.res("mid", deepest, deepest, tdim),
            attn: attn_at(&mut b, "mid.attn", deepest, config.levels),
        };
        let mut up = Vec::new();
        prev = deepest;
        for l in (0..config.levels).rev() {
            let w = widths[l];
            let res = b.res(&format!("up{l}"), prev + w, w, tdim);
            let attn = attn_at(&mut b, &format!("up{l}.attn"), w, l);
            up.push(Level { res, attn });
            prev = w;
        }
        let norm_out = b.norm("out.norm", widths[0]);
        let conv_out = b.conv(
            "out",
            widths[0],
            config.out_channels,
            3,
            config.zero_init_output,
        );
        Ok(Self {
            config,
            conv_in,
            time_mlp,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Sinusoidal features for a batch of timesteps, shape `[N, E]`.
    pub fn timestep_features(&self, steps: &[usize]) -> Vec<f32> {
        let e = self.config.time_dim();
        let half = e / 2;
        let mut out = vec![0.0f32; steps.len() * e];
        for (i, &t) in steps.iter().enumerate() {
            for j in 0..half {
                let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half as f64);
                let a = t as f64 * freq;
                out[i * e + j] = libm::sin(a) as f32;
                out[i * e + half + j] = libm::cos(a) as f32;
            }
        }
        out
    }

    /// Records the network on `tape`.
    ///
    /// `x` is `[N, in_channels, D, H, W]`, `steps` holds one timestep per sample
    /// (ignored without time embedding) and `context` is `[N, T, context_dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, steps: &[usize], context: Option<Var>) -> Var {
        let n = tape.shape(x)[0];
        let temb = self.time_mlp.map(|(l0, l1)| {
            assert_eq!(steps.len(), n, "one timestep per sample");
            let feats = tape.input(
                vec![n, self.config.time_dim()],
                self.timestep_features(steps),
            );
            let h = tape.linear(feats, l0);
            let h = tape.silu(h);
            let h = tape.linear(h, l1);
            tape.silu(h)
        });
        let ctx = match (&self.config.context_dim, context) {
            (Some(_), Some(c)) => Some(c),
            (Some(_), None) => panic!("conditioned U-Net needs context tokens"),
            (None, _) => None,
        };
        let mut h = tape.conv3d(x, self.conv_in);
        let mut skips = Vec::new();
        for (l, level) in self.down.iter().enumerate() {
            h = level.res.forward(tape, h, temb);
            if let (Some(a), Some(c)) = (&level.attn, ctx) {
                h = a.forward(tape, h, c);
            }
            skips.push(h);
            if l + 1 < self.down.len() {
                h = tape.avg_pool2(h);
            }
        }
        h = self.mid.res.forward(tape, h, temb);
        if let (Some(a), Some(c)) = (&self.mid.attn, ctx) {
            h = a.forward(tape, h, c);
        }
        for (i, level) in self.up.iter().enumerate() {
            if i > 0 {
                h = tape.upsample2(h);
            }
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip);
            h = level.res.forward(tape, h, temb);
            if let (Some(a), Some(c)) = (&level.attn, ctx) {
                h = a.forward(tape, h, c);
            }
        }
        let h = tape.group_norm(h, self.norm_out);
        let h = tape.silu(h);
        tape.conv3d(h, self.conv_out)
    }
}

/// Converts a channel-last volume into a `[C, D, H, W]` buffer, appended to `out`.
pub fn volume_to_ncdhw(v: &Volume3D, out: &mut Vec<f32>) {
    let [d, h, w, c] = v.dims();
    let s = d * h * w;
    let base = out.len();
    out.resize(base + c * s, 0.0);
    for (i, chunk) in v.data().chunks_exact(c).enumerate() {
        for (ci, &x) in chunk.iter().enumerate() {
            out[base + ci * s + i] = x;
        }
    }
}

/// Inverse of [`volume_to_ncdhw`] for one sample.
pub fn ncdhw_to_volume(
    data: &[f32],
    c: usize,
    spatial: [usize; 3],
    like: &Volume3D,
) -> Result<Volume3D> {
    let s = spatial[0] * spatial[1] * spatial[2];
    let mut out = vec![0.0f32; s * c];
    for ci in 0..c {
        for i in 0..s {
            out[i * c + ci] = data[ci * s + i];
        }
    }
    let mut v = Volume3D::new([spatial[0], spatial[1], spatial[2], c], like.spacing(), out)?;
    v.set_intensity_range(like.intensity_range());
    Ok(v)
}

/// A U-Net together with its weights, exposed as a [`NoisePredictor`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: UNet,
    pub store: ParamStore,
    contract: DenoiserContract,
}

impl Denoiser {
    pub fn new(
        contract: DenoiserContract,
        base_width: usize,
        levels: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let config = UNetConfig {
            in_channels: contract.image_channels + contract.concat_channels,
            out_channels: contract.image_channels,
            base_width,
            levels,
            time_embedding: true,
            context_dim: contract.context_dim,
            attn_dim: base_width.max(8),
            groups,
            zero_init_output: true,
        };
        let mut store = ParamStore::new();
        let net = UNet::new(config, &mut store, rng)?;
        Ok(Self {
            net,
            store,
            contract,
        })
    }

    pub fn contract_ref(&self) -> &DenoiserContract {
        &self.contract
    }

    /// Builds the `[1, C, D, H, W]` network input for one volume.
    pub fn pack_input(&self, x_t: &Volume3D, condition: &Condition) -> Vec<f32> {
        let mut buf = Vec::new();
        volume_to_ncdhw(x_t, &mut buf);
        if let Some(c) = &condition.channels {
            volume_to_ncdhw(c, &mut buf);
        }
        buf
    }

    fn check_spatial(&self, spatial: [usize; 3]) -> Result<()> {
        let m = self.net.config().spatial_multiple();
        if spatial.iter().any(|&s| s % m != 0) {
            return Err(Error::DimMismatch(format!(
                "spatial dims {spatial:?} must be multiples of {m}"
            )));
        }
        Ok(())
    }
}

impl NoisePredictor for Denoiser {
    fn contract(&self) -> DenoiserContract {
        self.contract
    }

    fn predict_noise(&self, x_t: &Volume3D, t: usize, condition: &Condition) -> Result<Volume3D> {
        let spatial = x_t.spatial();
        self.check_spatial(spatial)?;
        let cin = self.net.config().in_channels;
        let input = self.pack_input(x_t, condition);
        let mut tape = Tape::new(&self.store);
        let x = tape.input(vec![1, cin, spatial[0], spatial[1], spatial[2]], input);
        let ctx = condition
            .tokens
            .as_ref()
            .map(|tok| tape.input(vec![1, tok.count(), tok.dim()], tok.data().to_vec()));
        let out = self.net.forward(&mut tape, x, &[t], ctx);
        let c = self.contract.image_channels;
        let v = ncdhw_to_volume(tape.value(out), c, spatial, x_t)?;
        if !v.is_finite() {
            return Err(Error::Diverged(String::from(
                "noise prediction is not finite",
            )));
        }
        Ok(v)
    }
}
