//! Latent codec interface. At desk scale the codec is the identity:
//! latents are pixels, which keeps the training objective intact while
//! removing an out-of-scope learned autoencoder.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait LatentCodec<T: Scalar> {
    fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>>;
    fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>>;
}

pub struct IdentityCodec;

impl<T: Scalar> LatentCodec<T> for IdentityCodec {
    fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(image.clone())
    }
    fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(latent.clone())
    }
}
