//! `--data` values: a dataset file path, or `procedural:key=value,...`
//! for sprite scenes generated on the fly.

use std::path::Path;

use anyhow::{bail, Context, Result};
use monet_core::data::{DatasetReader, LabeledScene, SpriteConfig};
use monet_core::training::{ProceduralSource, SceneSource};

pub const PROCEDURAL_PREFIX: &str = "procedural:";

pub enum Source {
    File(DatasetReader),
    Procedural(ProceduralSource),
}

impl Source {
    pub fn open(arg: &str) -> Result<Self> {
        match arg.strip_prefix(PROCEDURAL_PREFIX) {
            Some(spec) => Ok(Self::Procedural(parse_procedural(spec)?)),
            None => {
                let reader = DatasetReader::open(Path::new(arg)).with_context(|| format!("opening dataset {arg}"))?;
                Ok(Self::File(reader))
            }
        }
    }

    pub fn as_dyn(&self) -> &dyn SceneSource {
        match self {
            Self::File(r) => r,
            Self::Procedural(p) => p,
        }
    }

    pub fn scene(&self, index: usize) -> Result<LabeledScene> {
        Ok(self.as_dyn().scene(index)?)
    }
}

/// Keys: `seed`, `count`, `size`, `start` (default 0), `max_sprites` (default 4).
fn parse_procedural(spec: &str) -> Result<ProceduralSource> {
    let (mut seed, mut count, mut size, mut start, mut max_sprites) = (None, None, None, 0u64, 4usize);
    for item in spec.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("expected key=value in procedural data spec, got {item:?}"))?;
        let bad = || format!("bad value {v:?} for {k}");
        match k.trim() {
            "seed" => seed = Some(v.trim().parse::<u64>().with_context(bad)?),
            "count" => count = Some(v.trim().parse::<usize>().with_context(bad)?),
            "size" => size = Some(v.trim().parse::<usize>().with_context(bad)?),
            "start" => start = v.trim().parse().with_context(bad)?,
            "max_sprites" => max_sprites = v.trim().parse().with_context(bad)?,
            other => bail!("unknown procedural data key {other:?} (expected seed, count, size, start, max_sprites)"),
        }
    }
    let (Some(seed), Some(count), Some(size)) = (seed, count, size) else {
        bail!("procedural data needs seed, count and size, e.g. procedural:seed=0,count=50000,size=64");
    };
    if count == 0 {
        bail!("procedural data count must be at least 1");
    }
    let config = SpriteConfig { max_sprites, ..SpriteConfig::new(size) };
    config.validate()?;
    Ok(ProceduralSource { seed, start, count, config })
}
