//! The restoration network (codec feeding the generator) and the critics.

use bfr_autograd::{Float, ParamStore, Tape, Var};

use crate::codec::{ChannelSchedule, Codec, CodecConfig};
use crate::discriminator::{Discriminator, Region, GLOBAL_NAMESPACE};
use crate::error::{invalid, Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::{batch_to_tensor, ImageTensor};
use crate::seed::rng_for;

#[derive(Clone, Debug)]
pub struct Restorer {
    pub codec: Codec,
    pub generator: Generator,
}

/// Graph nodes of one restoration pass.
#[derive(Clone, Debug)]
pub struct Restored {
    pub image: Var,
    pub recons: Vec<(usize, Var)>,
}

impl Restorer {
    pub fn new(codec: CodecConfig, generator: GeneratorConfig) -> Result<Self> {
        Ok(Self {
            codec: Codec::new(codec.clone())?,
            generator: Generator::new(codec, generator)?,
        })
    }

    pub fn resolution(&self) -> usize {
        self.codec.config.base_resolution
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.codec.init(store, &mut rng_for(seed, "init/codec"))?;
        self.generator
            .init(store, &mut rng_for(seed, "init/generator"))
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        lq: Var,
    ) -> Result<Restored> {
        let enc = self.codec.encode(tape, store, lq)?;
        let dec = self.codec.decode(tape, store, &enc)?;
        let ws = self.generator.map_latent(tape, store, enc.latent)?;
        let image = self.generator.synthesize(tape, store, &ws, &dec.features)?;
        Ok(Restored {
            image,
            recons: dec.recons,
        })
    }

    /// Restores images already at the model resolution, one at a time.
    pub fn restore(
        &self,
        store: &ParamStore<f32>,
        images: &[ImageTensor],
    ) -> Result<Vec<ImageTensor>> {
        let r = self.resolution();
        images
            .iter()
            .map(|img| {
                if img.height() != r || img.width() != r || img.channels() != 3 {
                    return Err(invalid!(
                        "model expects {r}x{r} RGB input, got {}x{}x{}",
                        img.height(),
                        img.width(),
                        img.channels()
                    ));
                }
                let mut tape = Tape::inference();
                let x = tape.constant(batch_to_tensor(std::slice::from_ref(img))?);
                let out = self.forward(&mut tape, store, x)?;
                ImageTensor::from_tensor(tape.value(out.image), 0)
            })
            .collect()
    }
}

/// Global discriminator plus one local discriminator per facial region.
#[derive(Clone, Debug)]
pub struct Critics {
    pub global: Discriminator,
    pub local: Vec<(Region, Discriminator)>,
}

impl Critics {
    pub fn new(resolution: usize, roi_size: usize, channels: ChannelSchedule) -> Result<Self> {
        let global = Discriminator::new(GLOBAL_NAMESPACE, resolution, channels)?;
        let local = Region::ALL
            .iter()
            .map(|&r| Ok((r, Discriminator::new(r.namespace(), roi_size, channels)?)))
            .collect::<Result<Vec<_>>>()
            .map_err(|e: Error| Error::Config(format!("local discriminator: {e}")))?;
        Ok(Self { global, local })
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        self.global
            .init(store, &mut rng_for(seed, "init/disc_global"))?;
        for (r, d) in &self.local {
            d.init(
                store,
                &mut rng_for(seed, &format!("init/{}", r.namespace())),
            )?;
        }
        Ok(())
    }
}
