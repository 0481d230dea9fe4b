use super::params::Linear;
use super::{Codec, ModelConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::posindex::{build_position_index, ConditionSlot, GridSpec, PositionIndex};
use crate::tensor::{Mat, Scalar};

/// Splits `image` into `ps x ps` patches flattened as `(row, col, channel)`,
/// zero-padding channels up to `channels`.
pub fn patchify_raw<T: Scalar>(image: &Image, ps: usize, channels: usize) -> Result<Mat<T>> {
    if ps == 0 || image.height % ps != 0 || image.width % ps != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {ps}x{ps} patches",
            image.height, image.width
        )));
    }
    if image.channels > channels {
        return Err(Error::Shape(format!("{} channels exceed patch channel budget {channels}", image.channels)));
    }
    let (gr, gc) = (image.height / ps, image.width / ps);
    let mut out = Mat::zeros(gr * gc, ps * ps * channels);
    for pr in 0..gr {
        for pc in 0..gc {
            let row = out.row_mut(pr * gc + pc);
            for dr in 0..ps {
                for dc in 0..ps {
                    let px = image.pixel(pr * ps + dr, pc * ps + dc);
                    let base = (dr * ps + dc) * channels;
                    for (ch, &v) in px.iter().enumerate() {
                        row[base + ch] = T::from_f64(v as f64);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_raw`] for a `height x width x channels` image.
pub fn unpatchify_raw<T: Scalar>(patches: &Mat<T>, ps: usize, height: usize, width: usize, channels: usize) -> Result<Image> {
    let (gr, gc) = (height / ps, width / ps);
    if patches.rows != gr * gc || patches.cols != ps * ps * channels || height % ps != 0 || width % ps != 0 {
        return Err(Error::Shape(format!(
            "{}x{} patch matrix does not tile a {height}x{width}x{channels} image with patch {ps}",
            patches.rows, patches.cols
        )));
    }
    let mut img = Image::new(height, width, channels);
    for pr in 0..gr {
        for pc in 0..gc {
            let row = patches.row(pr * gc + pc);
            for dr in 0..ps {
                for dc in 0..ps {
                    let base = (dr * ps + dc) * channels;
                    let px = img.pixel_mut(pr * ps + dr, pc * ps + dc);
                    for ch in 0..channels {
                        px[ch] = row[base + ch].as_f64() as f32;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Patch extraction followed by the linear patch embedding.
pub fn patchify<T: Scalar>(image: &Image, ps: usize, embed: &Linear<T>) -> Result<Mat<T>> {
    let channels = embed.in_dim() / (ps * ps);
    if channels * ps * ps != embed.in_dim() {
        return Err(Error::Shape(format!("embedding input {} is not a multiple of {ps}x{ps}", embed.in_dim())));
    }
    Ok(embed.forward(&patchify_raw(image, ps, channels)?))
}

/// Linear projection back to patches followed by patch reassembly.
pub fn unpatchify<T: Scalar>(tokens: &Mat<T>, ps: usize, height: usize, width: usize, unembed: &Linear<T>) -> Result<Image> {
    let patches = unembed.forward(tokens);
    let channels = unembed.out_dim() / (ps * ps);
    unpatchify_raw(&patches, ps, height, width, channels)
}

impl Codec {
    pub fn encode(self, image: &Image) -> Image {
        match self {
            Codec::Pixel => image.clone(),
            Codec::Pool2 => image.avg_pool2(),
        }
    }

    pub fn decode(self, latent: &Image) -> Image {
        match self {
            Codec::Pixel => latent.clone(),
            Codec::Pool2 => latent.upsample2(),
        }
    }
}

/// Raw patch matrix plus position index for one model call.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub patches: Mat<T>,
    pub index: PositionIndex,
}

impl<T: Scalar> ModelInput<T> {
    /// Concatenates the noisy target (already in model space) with encoded
    /// condition images, in the given order.
    pub fn new(cfg: &ModelConfig, noisy: &Image, conditions: &[(ConditionSlot, &Image)]) -> Result<Self> {
        let ps = cfg.patch_size;
        let target = GridSpec::new(noisy.height / ps, noisy.width / ps, ConditionSlot::Noise);
        let mut grids = Vec::with_capacity(conditions.len());
        let mut blocks = vec![patchify_raw::<T>(noisy, ps, cfg.in_channels)?];
        for (slot, img) in conditions {
            if *slot == ConditionSlot::Noise {
                return Err(Error::InvalidArgument("condition images cannot use the noise slot".into()));
            }
            grids.push(GridSpec::new(img.height / ps, img.width / ps, *slot));
            blocks.push(patchify_raw::<T>(img, ps, cfg.in_channels)?);
        }
        let index = build_position_index(target, &grids)?;
        let total = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(total * cfg.patch_in());
        for b in blocks {
            data.extend(b.data);
        }
        Ok(Self { patches: Mat::from_vec(total, cfg.patch_in(), data), index })
    }

    /// Replaces the id-0 block patches (used by the sampler between steps).
    pub fn set_noisy(&mut self, cfg: &ModelConfig, noisy: &Image) -> Result<()> {
        let block = *self.index.block(0).ok_or_else(|| Error::InvalidArgument("no id-0 block".into()))?;
        let p = patchify_raw::<T>(noisy, cfg.patch_size, cfg.in_channels)?;
        if p.rows != block.len() {
            return Err(Error::Shape(format!("noisy image gives {} tokens, block has {}", p.rows, block.len())));
        }
        let w = self.patches.cols;
        self.patches.data[block.start * w..block.end() * w].copy_from_slice(&p.data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_count() {
        let img = Image::new(4, 4, 3);
        let p: Mat<f64> = patchify_raw(&img, 2, 3).unwrap();
        assert_eq!(p.rows, 4);
        assert!(patchify_raw::<f64>(&Image::new(5, 4, 3), 2, 3).is_err());
    }

    #[test]
    fn identity_embedding_gives_flattened_patch() {
        let img = Image::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut embed: Linear<f64> = Linear::zeros(4, 4);
        for i in 0..4 {
            embed.weight.data[i * 4 + i] = 1.0;
        }
        let tok = patchify(&img, 2, &embed).unwrap();
        assert_eq!(tok.rows, 1);
        for (a, b) in tok.row(0).iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn round_trip_with_inverse_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = Image::new(8, 8, 3);
        img.data.iter_mut().for_each(|v| *v = rng.random());
        // embed = permutation scaled by 2, unembed = its inverse
        let d = 12;
        let mut embed: Linear<f64> = Linear::zeros(d, d);
        let mut unembed: Linear<f64> = Linear::zeros(d, d);
        for i in 0..d {
            let j = (i * 5 + 3) % d;
            embed.weight.data[j * d + i] = 2.0;
            unembed.weight.data[i * d + j] = 0.5;
        }
        let tokens = patchify(&img, 2, &embed).unwrap();
        let back = unpatchify(&tokens, 2, 8, 8, &unembed).unwrap();
        assert!(back.max_abs_diff(&img) as f64 <= 1e-12);
    }

    #[test]
    fn input_builder_pads_channels_and_indexes() {
        let cfg = ModelConfig { patch_size: 2, in_channels: 6, ..Default::default() };
        let noisy = Image::filled(4, 4, &[0.5, 0.5, 0.5]);
        let cloth = Image::filled(2, 2, &[1.0, 0.0, 0.0]);
        let inp: ModelInput<f32> = ModelInput::new(&cfg, &noisy, &[(ConditionSlot::Cloth, &cloth)]).unwrap();
        assert_eq!(inp.patches.rows, 5);
        assert_eq!(inp.patches.cols, 24);
        assert_eq!(inp.patches.at(0, 3), 0.0);
        assert_eq!(inp.patches.at(4, 0), 1.0);
        assert_eq!(inp.index.entries[4].id, 2);
        assert_eq!(inp.index.entries[4].row, 0.0);
    }
}
