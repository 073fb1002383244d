//! Text-guided image editing: repaint the regions where the caption and the
//! image-aligned embedding disagree, conditioned on the caption.

use crate::backends::BackendBundle;
use crate::error::Result;
use crate::mask::{BinaryMask, DiffMap};
use crate::maskgen::{generate_mask, MaskGenConfig};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, TokenEmbeddingMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput<T> {
    /// Normalized difference map between the aligned and caption embeddings.
    pub map: DiffMap<T>,
    /// Intermediate inconsistency mask.
    pub mask: BinaryMask,
    pub edited: ImageTensor<T>,
    /// The mask was empty and the image was returned unchanged.
    pub no_edit: bool,
}

/// Builds the intermediate mask from `(e_aln, e0)` and inpaints it with `e0`.
pub fn edit_image<T: Scalar>(
    image: &ImageTensor<T>,
    e0: &TokenEmbeddingMatrix<T>,
    e_aln: &TokenEmbeddingMatrix<T>,
    bundle: &BackendBundle<T>,
    cfg: &MaskGenConfig<T>,
) -> Result<EditOutput<T>> {
    let (map, mask) = generate_mask(image, e_aln, e0, bundle, cfg)?;
    if mask.is_empty() {
        return Ok(EditOutput {
            map,
            mask,
            edited: image.clone(),
            no_edit: true,
        });
    }
    let edited = bundle.inpaint(image, &mask, e0)?;
    Ok(EditOutput {
        map,
        mask,
        edited,
        no_edit: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::SyntheticBackend;

    #[test]
    fn consistent_pair_is_not_edited() {
        let bundle = BackendBundle::<f64>::synthetic(9);
        let backend = SyntheticBackend::<f64>::new(9);
        let e0 = backend.embed_words(&["owl", "bridge", "candle"]).unwrap();
        let image = backend.render(&e0).unwrap();
        let out = edit_image(&image, &e0, &e0, &bundle, &MaskGenConfig::default()).unwrap();
        assert!(out.no_edit);
        assert!(out.mask.is_empty());
        assert_eq!(out.edited, image);
    }

    #[test]
    fn planted_token_is_repainted_from_caption() {
        let bundle = BackendBundle::<f64>::synthetic(9);
        let backend = SyntheticBackend::<f64>::new(9);
        let e0 = backend.embed_words(&["owl", "bridge", "candle"]).unwrap();
        let e_aln = backend.embed_words(&["owl", "tractor", "candle"]).unwrap();
        let image = backend.render(&e_aln).unwrap();
        let out = edit_image(&image, &e0, &e_aln, &bundle, &MaskGenConfig::default()).unwrap();
        let patch = SyntheticBackend::<f64>::patch_mask(1);
        assert!(!out.no_edit);
        assert_eq!(out.mask, patch);
        assert_eq!(out.edited, backend.render(&e0).unwrap());
    }
}
