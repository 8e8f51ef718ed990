use super::model::{Backbone, EncoderLayer, PatchEmbed, PromptSet};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cuts an `H x W x C` image (row-major, channels last) into non-overlapping
/// `patch x patch` squares, in raster order. Each row of the result is one
/// patch flattened as `(row, col, channel)`.
pub fn patchify<S: Scalar>(
    image: &[S],
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Tensor<S>> {
    if image.len() != height * width * channels {
        return Err(Error::shape("patchify", &[height, width, channels], &[image.len()]));
    }
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (height / patch, width / patch);
    let patch_len = patch * patch * channels;
    let mut out = Vec::with_capacity(image.len());
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                let row = py * patch + y;
                let start = (row * width + px * patch) * channels;
                out.extend_from_slice(&image[start..start + patch * channels]);
            }
        }
    }
    Tensor::from_vec(&[ph * pw, patch_len], out)
}

/// Patches of all instances of one bag, stacked as `[n * w, patch_dim]`.
#[derive(Clone, Debug)]
pub struct BagPatches<S: Scalar> {
    patches: Tensor<S>,
    n: usize,
    per_instance: usize,
}

impl<S: Scalar> BagPatches<S> {
    /// `images` holds `n` consecutive `H x W x C` images with values stored
    /// as `f32`.
    pub fn from_images(images: &[f32], n: usize, size: usize, channels: usize, patch: usize) -> Result<Self> {
        let per_image = size * size * channels;
        if images.len() != n * per_image {
            return Err(Error::shape("bag images", &[n, size, size, channels], &[images.len()]));
        }
        let mut rows = Vec::with_capacity(images.len());
        let mut per_instance = 0;
        let mut patch_len = patch * patch * channels;
        for img in images.chunks(per_image.max(1)).take(n) {
            let converted: Vec<S> = img.iter().map(|&v| S::from_f64(v as f64)).collect();
            let p = patchify(&converted, size, size, channels, patch)?;
            per_instance = p.shape()[0];
            patch_len = p.shape()[1];
            rows.extend_from_slice(p.data());
        }
        if n == 0 {
            per_instance = (size / patch.max(1)).pow(2);
        }
        Ok(BagPatches {
            patches: Tensor::from_vec(&[n * per_instance, patch_len], rows)?,
            n,
            per_instance,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn patches_per_instance(&self) -> usize {
        self.per_instance
    }

    pub fn all(&self) -> &Tensor<S> {
        &self.patches
    }

    /// Patches of instances `start .. start + count`.
    pub fn instances(&self, start: usize, count: usize) -> Tensor<S> {
        let cols = self.patches.shape()[1];
        let rows = self.per_instance;
        let data = &self.patches.data()[start * rows * cols..(start + count) * rows * cols];
        Tensor::raw(vec![count * rows, cols], data.to_vec())
    }
}

/// `h = [h_1 .. h_n]`, one class-token feature per instance, plus the
/// gradient of the loss with respect to it once step 2 has run.
#[derive(Clone, Debug)]
pub struct FeatureMatrix<S: Scalar> {
    pub h: Tensor<S>,
    pub retained_grad: Option<Tensor<S>>,
}

impl<S: Scalar> FeatureMatrix<S> {
    pub fn new(h: Tensor<S>) -> Self {
        FeatureMatrix { h, retained_grad: None }
    }

    pub fn n(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn set_retained_grad(&mut self, g: Tensor<S>) -> Result<()> {
        if g.shape() != self.h.shape() {
            return Err(Error::shape("retained gradient", self.h.shape(), g.shape()));
        }
        self.retained_grad = Some(g.detach());
        Ok(())
    }
}

/// Token matrix of a batch of instances at one depth, `[batch * len, d]`
/// with every instance laid out as `[patches, prompts, class]`.
#[derive(Clone, Debug)]
pub struct TokenSequence<S: Scalar> {
    pub tokens: Tensor<S>,
    pub batch: usize,
    pub num_patches: usize,
    pub num_prompts: usize,
    pub layer: usize,
}

impl<S: Scalar> TokenSequence<S> {
    /// `w + k + 1`.
    pub fn len(&self) -> usize {
        self.num_patches + self.num_prompts + 1
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    /// Row of instance `i`'s class token.
    pub fn class_row(&self, i: usize) -> usize {
        i * self.len() + self.num_patches + self.num_prompts
    }

    /// Rows of instance `i`'s prompt tokens.
    pub fn prompt_rows(&self, i: usize) -> std::ops::Range<usize> {
        let start = i * self.len() + self.num_patches;
        start..start + self.num_prompts
    }
}

/// Linear patch projection plus the patch positional embeddings:
/// `[b * w, patch_dim] -> [b * w, d]`.
pub fn embed<S: Scalar>(
    g: &Graph<S>,
    params: &PatchEmbed<S>,
    patches: &Tensor<S>,
    num_patches: usize,
) -> Result<Tensor<S>> {
    let [rows, plen] = *patches.shape() else {
        return Err(Error::shape("embed", patches.shape(), params.weight.shape()));
    };
    if plen != params.weight.shape()[0] || num_patches == 0 || rows % num_patches != 0 {
        return Err(Error::shape("embed", patches.shape(), params.weight.shape()));
    }
    let d = params.weight.shape()[1];
    let b = rows / num_patches;
    let x = g.add(&g.matmul(patches, &params.weight)?, &params.bias)?;
    let pos = g.slice(&params.pos, 0, 0, num_patches)?;
    let x = g.add(&g.reshape(&x, &[b, num_patches, d])?, &pos)?;
    g.reshape(&x, &[b * num_patches, d])
}

/// Joins patch tokens, the shared prompt, and the class token (with its
/// position) into `[patches, prompts, class]` per instance.
pub fn assemble_sequence<S: Scalar>(
    g: &Graph<S>,
    patch_tokens: &Tensor<S>,
    prompt: Option<&PromptSet<S>>,
    params: &PatchEmbed<S>,
    num_patches: usize,
) -> Result<TokenSequence<S>> {
    let d = params.cls.shape()[1];
    let [rows, td] = *patch_tokens.shape() else {
        return Err(Error::shape("assemble_sequence", patch_tokens.shape(), &[d]));
    };
    if td != d || num_patches == 0 || rows % num_patches != 0 {
        return Err(Error::shape(
            "assemble_sequence",
            patch_tokens.shape(),
            &[num_patches, d],
        ));
    }
    let b = rows / num_patches;
    let cls_pos = g.slice(&params.pos, 0, num_patches, 1)?;
    let cls = g.reshape(&g.add(&params.cls, &cls_pos)?, &[1, 1, d])?;
    let cls = g.broadcast_to(&cls, &[b, 1, d])?;
    let patches = g.reshape(patch_tokens, &[b, num_patches, d])?;
    let k = prompt.map_or(0, |p| p.len());
    let tokens = match prompt {
        Some(p) if k > 0 => {
            if p.dim() != d {
                return Err(Error::shape("assemble_sequence", p.tokens.shape(), &[k, d]));
            }
            let p3 = g.broadcast_to(&g.reshape(&p.tokens, &[1, k, d])?, &[b, k, d])?;
            g.concat(&[&patches, &p3, &cls], 1)?
        }
        _ => g.concat(&[&patches, &cls], 1)?,
    };
    let len = num_patches + k + 1;
    Ok(TokenSequence {
        tokens: g.reshape(&tokens, &[b * len, d])?,
        batch: b,
        num_patches,
        num_prompts: k,
        layer: 0,
    })
}

/// Multi-head self-attention over one instance's `[len, 3d]` query/key/value
/// projection. Returns the concatenated head outputs `[len, d]` and each
/// head's `[len, len]` attention matrix.
pub fn attention<S: Scalar>(g: &Graph<S>, qkv: &Tensor<S>, num_heads: usize) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let d = qkv.shape()[1] / 3;
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(num_heads);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let q = g.slice(qkv, 1, h * dh, dh)?;
        let k = g.slice(qkv, 1, d + h * dh, dh)?;
        let v = g.slice(qkv, 1, 2 * d + h * dh, dh)?;
        let scores = g.scale(&g.matmul(&q, &g.transpose(&k)?)?, scale)?;
        let p = g.softmax(&scores)?;
        outs.push(g.matmul(&p, &v)?);
        probs.push(p);
    }
    let refs: Vec<&Tensor<S>> = outs.iter().collect();
    Ok((g.concat(&refs, 1)?, probs))
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`. Attention is
/// full and bidirectional within each instance.
pub fn encoder_layer<S: Scalar>(
    g: &Graph<S>,
    seq: &TokenSequence<S>,
    layer: &EncoderLayer<S>,
    num_heads: usize,
) -> Result<TokenSequence<S>> {
    let x = &seq.tokens;
    let d = x.shape()[1];
    if layer.qkv_w.shape() != [d, 3 * d] || !d.is_multiple_of(num_heads) {
        return Err(Error::shape("encoder_layer", x.shape(), layer.qkv_w.shape()));
    }
    let len = seq.len();
    let a = g.layernorm(x, &layer.ln1_g, &layer.ln1_b)?;
    let qkv = g.add(&g.matmul(&a, &layer.qkv_w)?, &layer.qkv_b)?;
    let mut heads = Vec::with_capacity(seq.batch);
    for i in 0..seq.batch {
        let rows = g.slice(&qkv, 0, i * len, len)?;
        heads.push(attention(g, &rows, num_heads)?.0);
    }
    let refs: Vec<&Tensor<S>> = heads.iter().collect();
    let attn = g.concat(&refs, 0)?;
    let attn = g.add(&g.matmul(&attn, &layer.proj_w)?, &layer.proj_b)?;
    let x = g.add(x, &attn)?;
    let m = g.layernorm(&x, &layer.ln2_g, &layer.ln2_b)?;
    let m = g.gelu(&g.add(&g.matmul(&m, &layer.fc1_w)?, &layer.fc1_b)?)?;
    let m = g.add(&g.matmul(&m, &layer.fc2_w)?, &layer.fc2_b)?;
    Ok(TokenSequence {
        tokens: g.add(&x, &m)?,
        layer: seq.layer + 1,
        ..seq.clone()
    })
}

impl<S: Scalar> Backbone<S> {
    /// Features of a batch of instances: `[b * w, patch_dim] -> [b, d]`.
    ///
    /// Whatever parameters are leaves of `g` (prompt, and the backbone itself
    /// when fine-tuning) get recorded; everything else is constant.
    pub fn encode(&self, g: &Graph<S>, prompt: Option<&PromptSet<S>>, patches: &Tensor<S>) -> Result<Tensor<S>> {
        let k = prompt.map_or(0, |p| p.len());
        if k != self.config.num_prompts {
            return Err(Error::InvalidArgument(format!(
                "backbone expects {} prompt tokens, got {k}",
                self.config.num_prompts
            )));
        }
        let w = self.config.num_patches();
        let tokens = embed(g, &self.embed, patches, w)?;
        let mut seq = assemble_sequence(g, &tokens, prompt, &self.embed, w)?;
        for layer in &self.layers {
            seq = encoder_layer(g, &seq, layer, self.config.num_heads)?;
        }
        let cls_rows: Vec<usize> = (0..seq.batch).map(|i| seq.class_row(i)).collect();
        let cls = g.gather_rows(&seq.tokens, &cls_rows)?;
        g.layernorm(&cls, &self.norm_g, &self.norm_b)
    }
}

/// Features of every instance of a bag in one pass on `g`. Recording or not
/// is decided by the graph's mode.
pub fn forward_features<S: Scalar>(
    g: &Graph<S>,
    backbone: &Backbone<S>,
    prompt: Option<&PromptSet<S>>,
    bag: &BagPatches<S>,
) -> Result<FeatureMatrix<S>> {
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    Ok(FeatureMatrix::new(backbone.encode(g, prompt, bag.all())?))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamTree;
    use crate::vit::VitConfig;

    fn random_bag(cfg: &VitConfig, n: usize, seed: u64) -> (Vec<f32>, BagPatches<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * cfg.image_size * cfg.image_size * cfg.channels;
        let imgs: Vec<f32> = (0..len).map(|_| rng.random::<f32>()).collect();
        let bag = BagPatches::from_images(&imgs, n, cfg.image_size, cfg.channels, cfg.patch_size).unwrap();
        (imgs, bag)
    }

    #[test]
    fn patchify_geometry() {
        let img = vec![0.0f64; 224 * 224 * 3];
        let p = patchify(&img, 224, 224, 3, 16).unwrap();
        assert_eq!(p.shape(), &[196, 768]);
        let img = vec![0.0f64; 32 * 32 * 3];
        assert_eq!(patchify(&img, 32, 32, 3, 8).unwrap().shape(), &[16, 192]);
        let img = vec![0.0f64; 30 * 30 * 3];
        assert!(patchify(&img, 30, 30, 3, 16).is_err());
    }

    #[test]
    fn patchify_is_row_major_and_non_overlapping() {
        // 4x4 single-channel image with value = pixel index
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = patchify(&img, 4, 4, 1, 2).unwrap();
        assert_eq!(p.row(0), &[0., 1., 4., 5.]);
        assert_eq!(p.row(1), &[2., 3., 6., 7.]);
        assert_eq!(p.row(2), &[8., 9., 12., 13.]);
        assert_eq!(p.row(3), &[10., 11., 14., 15.]);
    }

    #[test]
    fn embed_of_zero_image_is_positions() {
        let cfg = VitConfig::toy();
        let b = Backbone::<f64>::init(&cfg, 0).unwrap();
        let g = Graph::inference();
        let w = cfg.num_patches();
        let t = embed(&g, &b.embed, &Tensor::zeros(&[w, cfg.patch_dim()]), w).unwrap();
        assert_eq!(t.data(), &b.embed.pos.data()[..w * cfg.embed_dim]);
    }

    #[test]
    fn identity_embedding_on_single_pixel_patches() {
        // 1x1 patches of a 2x2, 1-channel image into d = 1
        let cfg = VitConfig {
            image_size: 2,
            patch_size: 1,
            channels: 1,
            embed_dim: 1,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 1.0,
            num_prompts: 0,
        };
        let mut b = Backbone::<f64>::init(&cfg, 0).unwrap();
        b.embed.weight = Tensor::ones(&[1, 1]);
        let img = [0.1, 0.2, 0.3, 0.4];
        let p = patchify(&img, 2, 2, 1, 1).unwrap();
        let g = Graph::inference();
        let t = embed(&g, &b.embed, &p, 4).unwrap();
        for i in 0..4 {
            assert!((t.data()[i] - (img[i] + b.embed.pos.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn embedded_row_depends_only_on_its_patch() {
        let cfg = VitConfig::toy();
        let b = Backbone::<f64>::init(&cfg, 3).unwrap();
        let (_, bag) = random_bag(&cfg, 1, 8);
        let w = cfg.num_patches();
        let g = Graph::inference();
        let base = embed(&g, &b.embed, bag.all(), w).unwrap();
        let mut perturbed = bag.all().clone();
        let plen = cfg.patch_dim();
        for v in &mut perturbed.data_mut()[plen..2 * plen] {
            *v += 0.37;
        }
        let moved = embed(&g, &b.embed, &perturbed, w).unwrap();
        let d = cfg.embed_dim;
        for row in 0..w {
            let same = base.data()[row * d..(row + 1) * d] == moved.data()[row * d..(row + 1) * d];
            assert_eq!(same, row != 1, "row {row}");
        }
    }

    #[test]
    fn sequence_layout() {
        let cfg = VitConfig::toy();
        let d = cfg.embed_dim;
        let w = cfg.num_patches();
        let b = Backbone::<f64>::init(&cfg, 0).unwrap();
        let g = Graph::inference();
        let tokens = Tensor::zeros(&[w, d]);

        let classic = assemble_sequence(&g, &tokens, None, &b.embed, w).unwrap();
        assert_eq!(classic.len(), w + 1);
        assert_eq!(classic.tokens.shape(), &[w + 1, d]);

        let p1 = PromptSet::<f64>::init(1, d, 1);
        let p2 = PromptSet::<f64>::init(1, d, 2);
        let s1 = assemble_sequence(&g, &tokens, Some(&p1), &b.embed, w).unwrap();
        let s2 = assemble_sequence(&g, &tokens, Some(&p2), &b.embed, w).unwrap();
        assert_eq!(s1.len(), w + 2);
        assert_eq!(s1.class_row(0), w + 1);
        for row in 0..s1.len() {
            let differs = s1.tokens.row(row) != s2.tokens.row(row);
            assert_eq!(differs, s1.prompt_rows(0).contains(&row), "row {row}");
        }
        assert_eq!(s1.tokens.row(w), p1.tokens.data());
        // class token carries its own position
        let cls_row: Vec<f64> = (0..d)
            .map(|j| b.embed.cls.data()[j] + b.embed.pos.data()[w * d + j])
            .collect();
        assert_eq!(s1.tokens.row(w + 1), cls_row.as_slice());
    }

    #[test]
    fn prompt_width_must_match() {
        let cfg = VitConfig::toy();
        let b = Backbone::<f64>::init(&cfg, 0).unwrap();
        let w = cfg.num_patches();
        let g = Graph::inference();
        let tokens = Tensor::zeros(&[w, cfg.embed_dim]);
        let bad = PromptSet::<f64>::init(1, cfg.embed_dim + 1, 0);
        assert!(assemble_sequence(&g, &tokens, Some(&bad), &b.embed, w).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = VitConfig::toy();
        let d = cfg.embed_dim;
        let layer = EncoderLayer::<f64>::zeroed(d, cfg.mlp_hidden());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2 * 6 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seq = TokenSequence {
            tokens: Tensor::from_vec(&[12, d], x).unwrap(),
            batch: 2,
            num_patches: 4,
            num_prompts: 1,
            layer: 0,
        };
        let out = encoder_layer(&Graph::inference(), &seq, &layer, cfg.num_heads).unwrap();
        assert_eq!(out.tokens, seq.tokens);
        assert_eq!(out.layer, 1);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let g = Graph::<f64>::inference();
        let qkv = Tensor::from_f64(&[1, 3], &[0.3, -2.0, 0.7]).unwrap();
        let (out, probs) = attention(&g, &qkv, 1).unwrap();
        assert_eq!(probs[0].data(), &[1.0]);
        assert_eq!(out.data(), &[0.7]);
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let cfg = VitConfig::toy();
        let b = Backbone::<f64>::init(&cfg, 7).unwrap();
        let (_, bag) = random_bag(&cfg, 1, 3);
        let g = Graph::inference();
        let w = cfg.num_patches();
        let d = cfg.embed_dim;
        let tokens = embed(&g, &b.embed, bag.all(), w).unwrap();
        let prompt = PromptSet::init(1, d, 0);
        let seq = assemble_sequence(&g, &tokens, Some(&prompt), &b.embed, w).unwrap();
        // swap patch rows 0 and 2 (content plus position travel together)
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..seq.len()).collect();
            p.swap(0, 2);
            p
        };
        let swapped = TokenSequence {
            tokens: g.gather_rows(&seq.tokens, &perm).unwrap(),
            ..seq.clone()
        };
        let out = encoder_layer(&g, &seq, &b.layers[0], cfg.num_heads).unwrap();
        let out_swapped = encoder_layer(&g, &swapped, &b.layers[0], cfg.num_heads).unwrap();
        let expected = g.gather_rows(&out.tokens, &perm).unwrap();
        assert!(out_swapped.tokens.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn features_basic_contracts() {
        let cfg = VitConfig::toy();
        let b = Backbone::<f64>::init(&cfg, 1).unwrap();
        let prompt = PromptSet::init(1, cfg.embed_dim, 2);
        let (imgs, bag) = random_bag(&cfg, 3, 5);
        let g = Graph::inference();
        let fm = forward_features(&g, &b, Some(&prompt), &bag).unwrap();
        assert_eq!(fm.h.shape(), &[3, cfg.embed_dim]);
        assert_eq!(g.num_nodes(), 0);

        // single instance equals the corresponding row
        let per = cfg.image_size * cfg.image_size * cfg.channels;
        let one =
            BagPatches::from_images(&imgs[per..2 * per], 1, cfg.image_size, cfg.channels, cfg.patch_size).unwrap();
        let h1 = forward_features(&g, &b, Some(&prompt), &one).unwrap();
        assert_eq!(h1.h.data(), fm.h.row(1));

        // duplicated instance gives bitwise equal rows
        let dup: Vec<f32> = [&imgs[..per], &imgs[..per]].concat();
        let dup = BagPatches::from_images(&dup, 2, cfg.image_size, cfg.channels, cfg.patch_size).unwrap();
        let hd = forward_features(&g, &b, Some(&prompt), &dup).unwrap();
        assert_eq!(hd.h.row(0), hd.h.row(1));

        let empty = BagPatches::<f64>::from_images(&[], 0, cfg.image_size, cfg.channels, cfg.patch_size).unwrap();
        assert!(matches!(
            forward_features(&g, &b, Some(&prompt), &empty),
            Err(Error::EmptyBag)
        ));
    }

    #[test]
    fn prompt_changes_every_feature_row() {
        let cfg = VitConfig::toy();
        let b = Backbone::<f64>::init(&cfg, 1).unwrap();
        let (_, bag) = random_bag(&cfg, 4, 6);
        let g = Graph::inference();
        let p1 = PromptSet::init(1, cfg.embed_dim, 1);
        let p2 = PromptSet::init(1, cfg.embed_dim, 2);
        let h1 = forward_features(&g, &b, Some(&p1), &bag).unwrap().h;
        let h2 = forward_features(&g, &b, Some(&p2), &bag).unwrap().h;
        for i in 0..4 {
            let delta: f64 = h1.row(i).iter().zip(h2.row(i)).map(|(a, b)| (a - b).abs()).sum();
            assert!(delta > 1e-6, "row {i} unchanged");
        }
    }

    #[test]
    fn no_prompt_reproduces_classic_vit() {
        let cfg = VitConfig::toy().with_prompts(0);
        let b = Backbone::<f64>::init(&cfg, 1).unwrap();
        let (_, bag) = random_bag(&cfg, 2, 6);
        let g = Graph::inference();
        let empty = PromptSet::<f64>::init(0, cfg.embed_dim, 99);
        let a = forward_features(&g, &b, None, &bag).unwrap().h;
        let c = forward_features(&g, &b, Some(&empty), &bag).unwrap().h;
        assert_eq!(a, c);
        // wrong prompt count is rejected
        let one = PromptSet::<f64>::init(1, cfg.embed_dim, 0);
        assert!(forward_features(&g, &b, Some(&one), &bag).is_err());
    }

    #[test]
    fn frozen_backbone_records_only_prompt_path() {
        let cfg = VitConfig::toy();
        let b = Backbone::<f64>::init(&cfg, 1).unwrap();
        let prompt = PromptSet::init(1, cfg.embed_dim, 2);
        let (_, bag) = random_bag(&cfg, 2, 6);
        let g = Graph::recording();
        let bound = prompt.bind(&g, true);
        let fm = forward_features(&g, &b, Some(&bound), &bag).unwrap();
        assert!(fm.h.requires_grad());
        let loss = g.sum_all(&fm.h).unwrap();
        let grads = g.backward(&loss).unwrap();
        // one leaf only: the prompt
        assert_eq!(grads.num_leaves(), 1);
        assert!(grads.wrt(&bound.tokens).unwrap().data().iter().any(|v| *v != 0.0));
    }
}
