//! Synthetic shapes benchmark: a labeled source domain and a fogged,
//! unlabeled target domain.

pub mod io;
pub mod scene;
pub mod shift;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    quantize, read_dataset, read_datasets, read_manifest, read_ppm, render, write_dataset, write_ppm, Datasets,
    GenConfig, Manifest, Record, Sample,
};
pub use scene::{generate_scene, generate_scene_in, PlacedObject, Scene, SceneSpec, ShapeClass};
pub use shift::{apply_domain_shift, ShiftRange, ShiftSpec};

/// Independent random streams drawn from one dataset seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Source,
    Target,
    Val,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Source => 1,
            Stream::Target => 2,
            Stream::Val => 3,
        }
    }

    /// Stream for the shift parameters of target-style images.
    fn shift_of(stream: Stream) -> u64 {
        stream.tag() | 0x100
    }

    pub fn file_prefix(self) -> &'static str {
        match self {
            Stream::Source => "source",
            Stream::Target | Stream::Val => "target",
        }
    }
}

/// ChaCha stream `(tag, index)` under key `seed`; distinct tags never share
/// keystream.
pub(crate) fn scene_rng(seed: u64, stream: impl Into<StreamId>, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.into().0 << 40) | index);
    rng
}

pub(crate) struct StreamId(u64);

impl From<Stream> for StreamId {
    fn from(s: Stream) -> Self {
        StreamId(s.tag())
    }
}

impl From<u64> for StreamId {
    fn from(v: u64) -> Self {
        StreamId(v)
    }
}
