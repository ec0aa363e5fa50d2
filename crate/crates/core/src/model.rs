//! The ABC segmentation network: bilinear attention (BAM), convolution
//! linear fusion transformer blocks (CLFT), u-shaped conv/dilated-conv
//! blocks (UCDC), and the UNet-style encoder-decoder assembly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError, TensorId};
use crate::params::{ForwardCtx, ParamId, ParamStore};

/// Weight-init gain. The fusion blocks add two or three branches at
/// every stage, so plain He init compounds activation variance until the
/// segmentation head saturates its sigmoid from the very first step; a
/// sub-1 gain keeps initial logits near zero across the supported depths.
const HE_GAIN: f32 = 0.75;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EncoderFirst {
    ConvModule,
    Clft,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DecoderFirst {
    Ucdc,
    ConvModule,
}

/// Network configuration. `input_dim` is the channel width C; C=16, 32
/// and 64 correspond to the small/base/large presets.
#[derive(Clone, Debug)]
pub struct AbcConfig {
    pub input_dim: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_first: EncoderFirst,
    pub decoder_first: DecoderFirst,
    pub dilations: [usize; 3],
    pub deep_supervision: bool,
}

impl AbcConfig {
    pub fn new(input_dim: usize, height: usize, width: usize) -> Self {
        AbcConfig {
            input_dim,
            height,
            width,
            encoder_first: EncoderFirst::ConvModule,
            decoder_first: DecoderFirst::Ucdc,
            dilations: [2, 4, 2],
            deep_supervision: true,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(GraphError::ShapeMismatch {
                op: "abc_config",
                detail: format!("resolution {}x{} not divisible by 16", self.height, self.width),
            });
        }
        if ![4, 8, 16, 32, 64, 96].contains(&self.input_dim) {
            return Err(GraphError::ShapeMismatch {
                op: "abc_config",
                detail: format!("unsupported input dim {}", self.input_dim),
            });
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(GraphError::ShapeMismatch {
                op: "abc_config",
                detail: String::from("dilation rates must be >= 1"),
            });
        }
        Ok(())
    }
}

// ── layers ───────────────────────────────────────────────────────────

struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    padding: usize,
    dilation: usize,
}

impl Conv2dLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        let w = store.add_he_uniform(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            cin * k * k,
            HE_GAIN,
            rng,
        );
        let b = store.add_zeros(format!("{name}.bias"), vec![cout]);
        Conv2dLayer { w, b, padding, dilation }
    }

    fn fwd(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        let w = ctx.bind(g, store, self.w);
        let b = ctx.bind(g, store, self.b);
        g.conv2d(x, w, b, 1, self.padding, self.dilation)
    }
}

struct LinearLayer {
    w: ParamId,
    b: ParamId,
}

impl LinearLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        m: usize,
        k: usize,
    ) -> Self {
        let w = store.add_he_uniform(format!("{name}.weight"), vec![k, m], m, HE_GAIN, rng);
        let b = store.add_zeros(format!("{name}.bias"), vec![k]);
        LinearLayer { w, b }
    }

    fn fwd(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        let w = ctx.bind(g, store, self.w);
        let b = ctx.bind(g, store, self.b);
        g.linear(x, w, b)
    }
}

/// Two 3x3 same-padding convolutions, ReLU after each.
pub struct ConvModule {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    cin: usize,
    cout: usize,
}

impl ConvModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        ConvModule {
            c1: Conv2dLayer::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1),
            c2: Conv2dLayer::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1),
            cin,
            cout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        let x = self.c1.fwd(g, ctx, store, x)?;
        let x = g.relu(x);
        let x = self.c2.fwd(g, ctx, store, x)?;
        Ok(g.relu(x))
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        conv_macs(self.cin, self.cout, 3, h, w) + conv_macs(self.cout, self.cout, 3, h, w)
    }
}

/// Bilinear attention: two pointwise-conv/FC projections, their outer
/// product, a 1->C pointwise lift, and a row softmax.
pub struct Bam {
    q_pw: Conv2dLayer,
    k_pw: Conv2dLayer,
    q_fc: LinearLayer,
    k_fc: LinearLayer,
    attn_pw: Conv2dLayer,
    channels: usize,
    height: usize,
    width: usize,
}

impl Bam {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Self {
        Bam {
            q_pw: Conv2dLayer::new(store, rng, &format!("{name}.q_pw"), channels, 1, 1, 0, 1),
            k_pw: Conv2dLayer::new(store, rng, &format!("{name}.k_pw"), channels, 1, 1, 0, 1),
            q_fc: LinearLayer::new(store, rng, &format!("{name}.q_fc"), height * width, height),
            k_fc: LinearLayer::new(store, rng, &format!("{name}.k_fc"), height * width, height),
            attn_pw: Conv2dLayer::new(store, rng, &format!("{name}.attn_pw"), 1, channels, 1, 0, 1),
            channels,
            height,
            width,
        }
    }

    /// `[N,C,H,W] -> [N,C,H,H]`, rows normalized over the last axis.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        let shape = g.shape(x).to_vec();
        let (n, h, w) = (shape[0], self.height, self.width);
        if shape != [n, self.channels, h, w] {
            return Err(GraphError::ShapeMismatch {
                op: "bam_forward",
                detail: format!(
                    "input {:?} does not match configured [{},{},{}]",
                    shape, self.channels, h, w
                ),
            });
        }
        let q = self.q_pw.fwd(g, ctx, store, x)?;
        let q = g.reshape(q, &[n, h * w])?;
        let q = self.q_fc.fwd(g, ctx, store, q)?;
        let k = self.k_pw.fwd(g, ctx, store, x)?;
        let k = g.reshape(k, &[n, h * w])?;
        let k = self.k_fc.fwd(g, ctx, store, k)?;
        // outer product q k^T per batch element
        let q = g.reshape(q, &[n, h, 1])?;
        let k = g.reshape(k, &[n, 1, h])?;
        let raw = g.bmm(q, k)?;
        let raw = g.reshape(raw, &[n, 1, h, h])?;
        let lifted = self.attn_pw.fwd(g, ctx, store, raw)?;
        g.softmax(lifted, 3)
    }

    fn macs(&self) -> u64 {
        let (c, h, w) = (self.channels, self.height, self.width);
        let pw = conv_macs(c, 1, 1, h, w);
        let fc = 2 * (h * (h * w)) as u64;
        let outer = 2 * (h * h) as u64;
        let lift = conv_macs(1, c, 1, h, h);
        2 * pw + 2 * fc + outer + lift
    }
}

/// Convolution linear fusion transformer block: a plain conv branch plus a
/// dilated branch form the value, BAM attention mixes rows, a learnable
/// scalar gates the attended features, and a conv+pointwise feedforward
/// maps to the output width.
pub struct Clft {
    bam: Bam,
    conv_branch: [Conv2dLayer; 3],
    dconv_branch: [Conv2dLayer; 3],
    alpha: ParamId,
    ff_conv: Conv2dLayer,
    ff_pw: Conv2dLayer,
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
}

impl Clft {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        height: usize,
        width: usize,
        dilations: [usize; 3],
    ) -> Self {
        let conv_branch = [
            Conv2dLayer::new(store, rng, &format!("{name}.conv1"), cin, cin, 3, 1, 1),
            Conv2dLayer::new(store, rng, &format!("{name}.conv2"), cin, cin, 3, 1, 1),
            Conv2dLayer::new(store, rng, &format!("{name}.conv3"), cin, cin, 3, 1, 1),
        ];
        // same padding for a dilated 3x3 conv is padding = dilation
        let dconv_branch = [
            Conv2dLayer::new(store, rng, &format!("{name}.dconv1"), cin, cin, 3, dilations[0], dilations[0]),
            Conv2dLayer::new(store, rng, &format!("{name}.dconv2"), cin, cin, 3, dilations[1], dilations[1]),
            Conv2dLayer::new(store, rng, &format!("{name}.dconv3"), cin, cin, 3, dilations[2], dilations[2]),
        ];
        // attention starts gated off
        let alpha = store.add(format!("{name}.alpha"), vec![1], vec![0.0]);
        Clft {
            bam: Bam::new(store, rng, &format!("{name}.bam"), cin, height, width),
            conv_branch,
            dconv_branch,
            alpha,
            ff_conv: Conv2dLayer::new(store, rng, &format!("{name}.ff_conv"), cin, cout, 3, 1, 1),
            ff_pw: Conv2dLayer::new(store, rng, &format!("{name}.ff_pw"), cin, cout, 1, 0, 1),
            cin,
            cout,
            height,
            width,
        }
    }

    /// The value path: conv branch plus dilated branch, ReLU between the
    /// convolutions of each branch.
    pub fn value(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        let mut c = self.conv_branch[0].fwd(g, ctx, store, x)?;
        c = g.relu(c);
        c = self.conv_branch[1].fwd(g, ctx, store, c)?;
        c = g.relu(c);
        c = self.conv_branch[2].fwd(g, ctx, store, c)?;
        let mut d = self.dconv_branch[0].fwd(g, ctx, store, x)?;
        d = g.relu(d);
        d = self.dconv_branch[1].fwd(g, ctx, store, d)?;
        d = g.relu(d);
        d = self.dconv_branch[2].fwd(g, ctx, store, d)?;
        g.add(c, d)
    }

    pub fn attention(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        self.bam.forward(g, ctx, store, x)
    }

    /// `[N,Cin,H,W] -> [N,Cout,H,W]` (Cout = 2*Cin in the standard net).
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        let shape = g.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let v = self.value(g, ctx, store, x)?;
        let attn = self.attention(g, ctx, store, x)?;
        // per-channel row mixing of v by the attention matrix
        let attn_b = g.reshape(attn, &[n * c, h, h])?;
        let v_b = g.reshape(v, &[n * c, h, w])?;
        let o_att = g.bmm(attn_b, v_b)?;
        let o_att = g.reshape(o_att, &[n, c, h, w])?;
        let alpha = ctx.bind(g, store, self.alpha);
        let gated = g.scale_by(o_att, alpha)?;
        let fused = g.add(x, v)?;
        let fused = g.add(fused, gated)?;
        let a = self.ff_conv.fwd(g, ctx, store, fused)?;
        let b = self.ff_pw.fwd(g, ctx, store, fused)?;
        g.add(a, b)
    }

    fn macs(&self) -> u64 {
        let (cin, cout, h, w) = (self.cin, self.cout, self.height, self.width);
        let branches = 6 * conv_macs(cin, cin, 3, h, w);
        let att_mix = 2 * (cin * h * h * w) as u64;
        let ff = conv_macs(cin, cout, 3, h, w) + conv_macs(cin, cout, 1, h, w);
        branches + self.bam.macs() + att_mix + ff
    }
}

/// U-shaped conv/dilated-conv block: receptive field grows over the first
/// three layers then shrinks, with additive skips x2->x4 and x1->x5.
pub struct Ucdc {
    c1: Conv2dLayer,
    d2: Conv2dLayer,
    d3: Conv2dLayer,
    d4: Conv2dLayer,
    c5: Conv2dLayer,
    cin: usize,
    cout: usize,
}

impl Ucdc {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Ucdc {
            c1: Conv2dLayer::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1),
            d2: Conv2dLayer::new(store, rng, &format!("{name}.dconv2"), cout, cout, 3, 2, 2),
            d3: Conv2dLayer::new(store, rng, &format!("{name}.dconv3"), cout, cout, 3, 4, 4),
            d4: Conv2dLayer::new(store, rng, &format!("{name}.dconv4"), cout, cout, 3, 2, 2),
            c5: Conv2dLayer::new(store, rng, &format!("{name}.conv5"), cout, cout, 3, 1, 1),
            cin,
            cout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        let x1 = self.c1.fwd(g, ctx, store, x)?;
        let x2 = self.d2.fwd(g, ctx, store, x1)?;
        let x3 = self.d3.fwd(g, ctx, store, x2)?;
        let x4 = self.d4.fwd(g, ctx, store, x3)?;
        let x4 = g.add(x4, x2)?;
        let x5 = self.c5.fwd(g, ctx, store, x4)?;
        g.add(x5, x1)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        conv_macs(self.cin, self.cout, 3, h, w) + 4 * conv_macs(self.cout, self.cout, 3, h, w)
    }
}

enum Stage {
    Conv(ConvModule),
    Clft(Clft),
    Ucdc(Ucdc),
}

impl Stage {
    fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId, GraphError> {
        match self {
            Stage::Conv(m) => m.forward(g, ctx, store, x),
            Stage::Clft(m) => m.forward(g, ctx, store, x),
            Stage::Ucdc(m) => m.forward(g, ctx, store, x),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Stage::Conv(m) => m.macs(h, w),
            Stage::Clft(m) => m.macs(),
            Stage::Ucdc(m) => m.macs(h, w),
        }
    }
}

/// Output of one forward pass.
pub struct AbcOutput {
    pub main_logits: TensorId,
    pub aux_logits: Vec<TensorId>,
}

pub struct AbcModel {
    pub config: AbcConfig,
    pub store: ParamStore,
    enc0: Stage,
    enc1: Clft,
    enc2: Clft,
    enc3: Clft,
    mid: Ucdc,
    dec1: Stage,
    dec2: ConvModule,
    dec3: ConvModule,
    dec4: ConvModule,
    head: Conv2dLayer,
    aux_heads: Vec<Conv2dLayer>,
}

impl AbcModel {
    pub fn new(config: AbcConfig, seed: u64) -> Result<Self, GraphError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.input_dim;
        let (h, w) = (config.height, config.width);
        let dil = config.dilations;

        let enc0 = match config.encoder_first {
            EncoderFirst::ConvModule => {
                Stage::Conv(ConvModule::new(&mut store, &mut rng, "enc0", 1, c))
            }
            EncoderFirst::Clft => {
                Stage::Clft(Clft::new(&mut store, &mut rng, "enc0", 1, c, h, w, dil))
            }
        };
        let enc1 = Clft::new(&mut store, &mut rng, "enc1", c, 2 * c, h / 2, w / 2, dil);
        let enc2 = Clft::new(&mut store, &mut rng, "enc2", 2 * c, 4 * c, h / 4, w / 4, dil);
        let enc3 = Clft::new(&mut store, &mut rng, "enc3", 4 * c, 8 * c, h / 8, w / 8, dil);
        let mid = Ucdc::new(&mut store, &mut rng, "mid", 8 * c, 8 * c);
        let dec1 = match config.decoder_first {
            DecoderFirst::Ucdc => {
                Stage::Ucdc(Ucdc::new(&mut store, &mut rng, "dec1", 16 * c, 4 * c))
            }
            DecoderFirst::ConvModule => {
                Stage::Conv(ConvModule::new(&mut store, &mut rng, "dec1", 16 * c, 4 * c))
            }
        };
        let dec2 = ConvModule::new(&mut store, &mut rng, "dec2", 8 * c, 2 * c);
        let dec3 = ConvModule::new(&mut store, &mut rng, "dec3", 4 * c, c);
        let dec4 = ConvModule::new(&mut store, &mut rng, "dec4", 2 * c, c);
        let head = Conv2dLayer::new(&mut store, &mut rng, "head", c, 1, 1, 0, 1);
        let aux_heads = if config.deep_supervision {
            vec![
                Conv2dLayer::new(&mut store, &mut rng, "aux1", 4 * c, 1, 1, 0, 1),
                Conv2dLayer::new(&mut store, &mut rng, "aux2", 2 * c, 1, 1, 0, 1),
                Conv2dLayer::new(&mut store, &mut rng, "aux3", c, 1, 1, 0, 1),
            ]
        } else {
            Vec::new()
        };

        Ok(AbcModel {
            config,
            store,
            enc0,
            enc1,
            enc2,
            enc3,
            mid,
            dec1,
            dec2,
            dec3,
            dec4,
            head,
            aux_heads,
        })
    }

    /// `[N,1,H,W] -> logits [N,1,H,W]` plus the deep-supervision heads.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        image: TensorId,
    ) -> Result<AbcOutput, GraphError> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.config.height || shape[3] != self.config.width
        {
            return Err(GraphError::ShapeMismatch {
                op: "abc_forward",
                detail: format!(
                    "input {:?} vs configured [N,1,{},{}]",
                    shape, self.config.height, self.config.width
                ),
            });
        }
        let store = &self.store;

        let e0 = self.enc0.forward(g, ctx, store, image)?;
        let p1 = g.maxpool2x2(e0)?;
        let e1 = self.enc1.forward(g, ctx, store, p1)?;
        let p2 = g.maxpool2x2(e1)?;
        let e2 = self.enc2.forward(g, ctx, store, p2)?;
        let p3 = g.maxpool2x2(e2)?;
        let e3 = self.enc3.forward(g, ctx, store, p3)?;
        let p4 = g.maxpool2x2(e3)?;
        let m = self.mid.forward(g, ctx, store, p4)?;

        let u1 = g.upsample_bilinear2x(m)?;
        let cat1 = g.concat_channels(u1, e3)?;
        let d1 = self.dec1.forward(g, ctx, store, cat1)?;
        let u2 = g.upsample_bilinear2x(d1)?;
        let cat2 = g.concat_channels(u2, e2)?;
        let d2 = self.dec2.forward(g, ctx, store, cat2)?;
        let u3 = g.upsample_bilinear2x(d2)?;
        let cat3 = g.concat_channels(u3, e1)?;
        let d3 = self.dec3.forward(g, ctx, store, cat3)?;
        let u4 = g.upsample_bilinear2x(d3)?;
        let cat4 = g.concat_channels(u4, e0)?;
        let d4 = self.dec4.forward(g, ctx, store, cat4)?;
        let main_logits = self.head.fwd(g, ctx, store, d4)?;

        let mut aux_logits = Vec::new();
        if self.config.deep_supervision {
            for (head, (feat, ups)) in self
                .aux_heads
                .iter()
                .zip([(d1, 3usize), (d2, 2), (d3, 1)])
            {
                let mut a = head.fwd(g, ctx, store, feat)?;
                for _ in 0..ups {
                    a = g.upsample_bilinear2x(a)?;
                }
                aux_logits.push(a);
            }
        }
        Ok(AbcOutput { main_logits, aux_logits })
    }

    /// FLOPs (2 per multiply-accumulate) of one single-image forward pass
    /// through the assembled graph, computed analytically. Pooling,
    /// upsampling, activations, and additions are not counted.
    pub fn count_flops(&self) -> u64 {
        let (h, w) = (self.config.height, self.config.width);
        let c = self.config.input_dim;
        let mut total = self.enc0.macs(h, w);
        total += self.enc1.macs();
        total += self.enc2.macs();
        total += self.enc3.macs();
        total += self.mid.macs(h / 16, w / 16);
        total += self.dec1.macs(h / 8, w / 8);
        total += self.dec2.macs(h / 4, w / 4);
        total += self.dec3.macs(h / 2, w / 2);
        total += self.dec4.macs(h, w);
        total += conv_macs(c, 1, 1, h, w);
        if self.config.deep_supervision {
            total += conv_macs(4 * c, 1, 1, h / 8, w / 8);
            total += conv_macs(2 * c, 1, 1, h / 4, w / 4);
            total += conv_macs(c, 1, 1, h / 2, w / 2);
        }
        total
    }

    /// Direct access to the three encoder CLFT blocks (outermost first).
    pub fn clft_blocks(&self) -> [&Clft; 3] {
        [&self.enc1, &self.enc2, &self.enc3]
    }

    /// Parameter ids of every BAM weight and bias in the network.
    pub fn bam_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.contains(".bam."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Parameter ids of every CLFT gating scalar.
    pub fn alpha_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".alpha"))
            .map(|(id, _)| id)
            .collect()
    }
}

fn conv_macs(cin: usize, cout: usize, k: usize, oh: usize, ow: usize) -> u64 {
    2 * (k * k * cin * cout * oh * ow) as u64
}

/// FLOPs of one forward pass for a config, without building parameters.
pub fn count_flops(config: &AbcConfig) -> Result<u64, GraphError> {
    let model = AbcModel::new(config.clone(), 0)?;
    Ok(model.count_flops())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_store(store: &mut ParamStore) {
        for (_, p) in store.iter_mut() {
            for v in p.data.iter_mut() {
                *v = 0.0;
            }
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_input(seed: u64, n: usize) -> Vec<f32> {
        use rand::Rng;
        let mut r = rng(seed);
        (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn bam_zero_input_gives_uniform_rows() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let bam = Bam::new(&mut store, &mut r, "b", 4, 8, 8);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 4, 8, 8], vec![0.0; 4 * 64]);
        let attn = bam.forward(&mut g, &mut ctx, &store, x).unwrap();
        assert_eq!(g.shape(attn), &[1, 4, 8, 8]);
        for v in g.data(attn) {
            assert!((v - 1.0 / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bam_rejects_resolution_mismatch() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let bam = Bam::new(&mut store, &mut r, "b", 4, 8, 8);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 4, 16, 16], vec![0.0; 4 * 256]);
        assert!(bam.forward(&mut g, &mut ctx, &store, x).is_err());
    }

    #[test]
    fn bam_matches_straight_line_recomputation() {
        let (c, h, w) = (2usize, 4usize, 4usize);
        let mut store = ParamStore::new();
        let mut r = rng(42);
        let bam = Bam::new(&mut store, &mut r, "b", c, h, w);
        // one-hot pixel input
        let mut input = vec![0f32; c * h * w];
        input[1 * h * w + 2 * w + 3] = 1.0;

        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, c, h, w], input.clone());
        let attn = bam.forward(&mut g, &mut ctx, &store, x).unwrap();

        // independent straight-line pipeline from the raw parameters
        let get = |name: &str| store.get(store.find(name).unwrap()).data.clone();
        let project = |pw_w: &[f32], pw_b: &[f32], fc_w: &[f32], fc_b: &[f32]| -> Vec<f32> {
            let mut flat = vec![0f32; h * w];
            for p in 0..h * w {
                let mut acc = pw_b[0];
                for ci in 0..c {
                    acc += pw_w[ci] * input[ci * h * w + p];
                }
                flat[p] = acc;
            }
            (0..h)
                .map(|i| {
                    let mut acc = fc_b[i];
                    for p in 0..h * w {
                        acc += fc_w[i * h * w + p] * flat[p];
                    }
                    acc
                })
                .collect()
        };
        let q = project(&get("b.q_pw.weight"), &get("b.q_pw.bias"), &get("b.q_fc.weight"), &get("b.q_fc.bias"));
        let k = project(&get("b.k_pw.weight"), &get("b.k_pw.bias"), &get("b.k_fc.weight"), &get("b.k_fc.bias"));
        let (aw, ab) = (get("b.attn_pw.weight"), get("b.attn_pw.bias"));
        let mut expect = vec![0f32; c * h * h];
        for ci in 0..c {
            for i in 0..h {
                let row: Vec<f32> = (0..h).map(|j| aw[ci] * (q[i] * k[j]) + ab[ci]).collect();
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = row.iter().map(|&v| libm::expf(v - m)).collect();
                let s: f32 = exps.iter().sum();
                for j in 0..h {
                    expect[(ci * h + i) * h + j] = exps[j] / s;
                }
            }
        }
        for (a, b) in g.data(attn).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn clft_value_zero_weights_is_zero() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let clft = Clft::new(&mut store, &mut r, "c", 4, 8, 8, 8, [2, 4, 2]);
        zero_store(&mut store);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 4, 8, 8], rand_input(3, 4 * 64));
        let v = clft.value(&mut g, &mut ctx, &store, x).unwrap();
        assert!(g.data(v).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clft_value_preserves_shape() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let clft = Clft::new(&mut store, &mut r, "c", 8, 16, 16, 16, [2, 4, 2]);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 8, 16, 16], rand_input(4, 8 * 256));
        let v = clft.value(&mut g, &mut ctx, &store, x).unwrap();
        assert_eq!(g.shape(v), &[1, 8, 16, 16]);
    }

    #[test]
    fn clft_dilation_one_branch_equals_plain_stack() {
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let clft = Clft::new(&mut store, &mut r, "c", 3, 6, 8, 8, [1, 1, 1]);
        // silence the plain-conv branch so value() is the dilated branch alone
        for name in ["c.conv1", "c.conv2", "c.conv3"] {
            for suffix in ["weight", "bias"] {
                let id = store.find(&format!("{name}.{suffix}")).unwrap();
                for v in store.get_mut(id).data.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let input = rand_input(6, 3 * 64);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 3, 8, 8], input.clone());
        let v = clft.value(&mut g, &mut ctx, &store, x).unwrap();

        // plain 3-conv stack with the dilated branch's weights, dilation 1
        let mut g2 = Graph::new();
        let mut y = g2.constant(&[1, 3, 8, 8], input);
        for (i, name) in ["c.dconv1", "c.dconv2", "c.dconv3"].iter().enumerate() {
            let w = store.get(store.find(&format!("{name}.weight")).unwrap());
            let b = store.get(store.find(&format!("{name}.bias")).unwrap());
            let wi = g2.constant(&w.shape.clone(), w.data.clone());
            let bi = g2.constant(&b.shape.clone(), b.data.clone());
            y = g2.conv2d(y, wi, bi, 1, 1, 1).unwrap();
            if i < 2 {
                y = g2.relu(y);
            }
        }
        for (a, b) in g.data(v).iter().zip(g2.data(y)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn clft_forward_doubles_channels() {
        let mut store = ParamStore::new();
        let mut r = rng(8);
        let clft = Clft::new(&mut store, &mut r, "c", 16, 32, 32, 32, [2, 4, 2]);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 16, 32, 32], rand_input(9, 16 * 32 * 32));
        let o = clft.forward(&mut g, &mut ctx, &store, x).unwrap();
        assert_eq!(g.shape(o), &[1, 32, 32, 32]);
    }

    #[test]
    fn clft_alpha_zero_output_is_feedforward_of_input_plus_value() {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let clft = Clft::new(&mut store, &mut r, "c", 4, 8, 8, 8, [2, 4, 2]);
        let input = rand_input(11, 4 * 64);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 4, 8, 8], input.clone());
        let o = clft.forward(&mut g, &mut ctx, &store, x).unwrap();

        // alpha is initialized to 0, so O = Conv(I+v) + PW(I+v)
        let mut g2 = Graph::new();
        let mut ctx2 = ForwardCtx::new(&store);
        let x2 = g2.constant(&[1, 4, 8, 8], input);
        let v = clft.value(&mut g2, &mut ctx2, &store, x2).unwrap();
        let fused = g2.add(x2, v).unwrap();
        let a = clft.ff_conv.fwd(&mut g2, &mut ctx2, &store, fused).unwrap();
        let b = clft.ff_pw.fwd(&mut g2, &mut ctx2, &store, fused).unwrap();
        let expect = g2.add(a, b).unwrap();
        for (x, y) in g.data(o).iter().zip(g2.data(expect)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ucdc_zero_weights_gives_zero_output() {
        let mut store = ParamStore::new();
        let mut r = rng(12);
        let ucdc = Ucdc::new(&mut store, &mut r, "u", 8, 8);
        zero_store(&mut store);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 8, 16, 16], rand_input(13, 8 * 256));
        let o = ucdc.forward(&mut g, &mut ctx, &store, x).unwrap();
        assert_eq!(g.shape(o), &[1, 8, 16, 16]);
        assert!(g.data(o).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ucdc_matches_straight_line_recomposition() {
        let mut store = ParamStore::new();
        let mut r = rng(14);
        let ucdc = Ucdc::new(&mut store, &mut r, "u", 3, 5);
        let input = rand_input(15, 3 * 64);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 3, 8, 8], input.clone());
        let o = ucdc.forward(&mut g, &mut ctx, &store, x).unwrap();

        // five layers and two adds, applied explicitly
        let mut g2 = Graph::new();
        let conv = |g2: &mut Graph, name: &str, x, pad, dil| {
            let w = store.get(store.find(&format!("{name}.weight")).unwrap());
            let b = store.get(store.find(&format!("{name}.bias")).unwrap());
            let wi = g2.constant(&w.shape.clone(), w.data.clone());
            let bi = g2.constant(&b.shape.clone(), b.data.clone());
            g2.conv2d(x, wi, bi, 1, pad, dil).unwrap()
        };
        let x0 = g2.constant(&[1, 3, 8, 8], input);
        let x1 = conv(&mut g2, "u.conv1", x0, 1, 1);
        let x2 = conv(&mut g2, "u.dconv2", x1, 2, 2);
        let x3 = conv(&mut g2, "u.dconv3", x2, 4, 4);
        let x4 = conv(&mut g2, "u.dconv4", x3, 2, 2);
        let x4 = g2.add(x4, x2).unwrap();
        let x5 = conv(&mut g2, "u.conv5", x4, 1, 1);
        let expect = g2.add(x5, x1).unwrap();
        for (a, b) in g.data(o).iter().zip(g2.data(expect)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_module_matches_composed_convs() {
        let mut store = ParamStore::new();
        let mut r = rng(16);
        let cm = ConvModule::new(&mut store, &mut r, "m", 2, 4);
        let input = rand_input(17, 2 * 64);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&store);
        let x = g.constant(&[1, 2, 8, 8], input.clone());
        let o = cm.forward(&mut g, &mut ctx, &store, x).unwrap();
        assert_eq!(g.shape(o), &[1, 4, 8, 8]);

        let mut g2 = Graph::new();
        let conv = |g2: &mut Graph, name: &str, x| {
            let w = store.get(store.find(&format!("{name}.weight")).unwrap());
            let b = store.get(store.find(&format!("{name}.bias")).unwrap());
            let wi = g2.constant(&w.shape.clone(), w.data.clone());
            let bi = g2.constant(&b.shape.clone(), b.data.clone());
            g2.conv2d(x, wi, bi, 1, 1, 1).unwrap()
        };
        let x0 = g2.constant(&[1, 2, 8, 8], input);
        let y1 = conv(&mut g2, "m.conv1", x0);
        let y1 = g2.relu(y1);
        let y2 = conv(&mut g2, "m.conv2", y1);
        let expect = g2.relu(y2);
        for (a, b) in g.data(o).iter().zip(g2.data(expect)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn abc_forward_preserves_resolution_with_aux_heads() {
        let model = AbcModel::new(AbcConfig::new(8, 64, 64), 7).unwrap();
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&model.store);
        let x = g.constant(&[2, 1, 64, 64], rand_input(18, 2 * 64 * 64));
        let out = model.forward(&mut g, &mut ctx, x).unwrap();
        assert_eq!(g.shape(out.main_logits), &[2, 1, 64, 64]);
        assert_eq!(out.aux_logits.len(), 3);
        for &a in &out.aux_logits {
            assert_eq!(g.shape(a), &[2, 1, 64, 64]);
        }
    }

    #[test]
    fn abc_forward_zero_params_gives_zero_logits() {
        let mut model = AbcModel::new(AbcConfig::new(4, 32, 32), 7).unwrap();
        zero_store(&mut model.store);
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&model.store);
        let x = g.constant(&[1, 1, 32, 32], rand_input(19, 32 * 32));
        let out = model.forward(&mut g, &mut ctx, x).unwrap();
        assert!(g.data(out.main_logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn abc_forward_rejects_resolution_mismatch() {
        let model = AbcModel::new(AbcConfig::new(4, 32, 32), 7).unwrap();
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&model.store);
        let x = g.constant(&[1, 1, 16, 16], vec![0.0; 256]);
        assert!(model.forward(&mut g, &mut ctx, x).is_err());
    }

    #[test]
    fn abc_config_rejects_bad_resolution() {
        assert!(AbcConfig::new(8, 60, 64).validate().is_err());
        assert!(AbcConfig::new(7, 64, 64).validate().is_err());
        assert!(AbcConfig::new(8, 64, 64).validate().is_ok());
    }

    #[test]
    fn pointwise_flops_formula() {
        // 2 * k^2 * Cin * Cout * H * W for a single pointwise conv
        let mut g = Graph::new();
        let x = g.constant(&[1, 2, 8, 8], vec![0.0; 2 * 64]);
        let w = g.constant(&[4, 2, 1, 1], vec![0.0; 8]);
        let b = g.constant(&[4], vec![0.0; 4]);
        g.conv2d(x, w, b, 1, 0, 1).unwrap();
        assert_eq!(g.flops(), 1024);
    }

    #[test]
    fn analytic_flops_matches_recorded_graph() {
        let model = AbcModel::new(AbcConfig::new(4, 16, 16), 3).unwrap();
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&model.store);
        let x = g.constant(&[1, 1, 16, 16], vec![0.1; 256]);
        model.forward(&mut g, &mut ctx, x).unwrap();
        assert_eq!(model.count_flops(), g.flops());
    }

    #[test]
    fn encoder_and_decoder_switches_build_and_run() {
        let mut cfg = AbcConfig::new(4, 16, 16);
        cfg.encoder_first = EncoderFirst::Clft;
        cfg.decoder_first = DecoderFirst::ConvModule;
        let model = AbcModel::new(cfg, 1).unwrap();
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&model.store);
        let x = g.constant(&[1, 1, 16, 16], rand_input(20, 256));
        let out = model.forward(&mut g, &mut ctx, x).unwrap();
        assert_eq!(g.shape(out.main_logits), &[1, 1, 16, 16]);
    }
}
