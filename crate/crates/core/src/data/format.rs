//! Dataset container: one JSON header line, then `count` fixed-size
//! little-endian records, each ending in a CRC-32 of its own bytes.
//!
//! Record layout:
//! ```text
//! u8            sprite count
//! [u8; 3]       background colour
//! max_sprites × { u8 shape, [u8; 3] colour, f64 x, f64 y, f64 scale, f64 orientation }
//! [u8; H·W·3]   pixels
//! mask_slots × [u8; ⌈H·W/8⌉]   bit-packed mask planes, LSB first
//! u32           CRC-32
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LabeledScene, Sprite, SpriteShape};
use crate::error::{MonetError, Result};

pub const MAGIC: &str = "MONET-SCENES";
pub const FORMAT_VERSION: u32 = 1;
const SPRITE_BYTES: usize = 4 + 4 * 8;
const MAX_HEADER: u64 = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub count: u64,
    pub height: usize,
    pub width: usize,
    pub mask_slots: usize,
    pub max_sprites: usize,
    /// Generator seed, when the scenes are procedural.
    pub seed: Option<u64>,
    pub source: String,
}

impl DatasetHeader {
    pub fn new(count: u64, height: usize, width: usize, mask_slots: usize, max_sprites: usize, source: &str) -> Self {
        Self {
            magic: MAGIC.into(),
            version: FORMAT_VERSION,
            count,
            height,
            width,
            mask_slots,
            max_sprites,
            seed: None,
            source: source.into(),
        }
    }

    fn plane_bytes(&self) -> usize {
        (self.height * self.width).div_ceil(8)
    }

    pub fn record_bytes(&self) -> usize {
        4 + self.max_sprites * SPRITE_BYTES + self.height * self.width * 3 + self.mask_slots * self.plane_bytes() + 4
    }

    fn validate(&self) -> Result<()> {
        if self.magic != MAGIC {
            return Err(MonetError::DatasetHeader(format!("magic {:?}, expected {MAGIC:?}", self.magic)));
        }
        if self.version != FORMAT_VERSION {
            return Err(MonetError::DatasetVersion { found: self.version, expected: FORMAT_VERSION });
        }
        if self.height == 0
            || self.width == 0
            || self.mask_slots == 0
            || self.mask_slots > 256
            || self.max_sprites > 255
        {
            return Err(MonetError::DatasetHeader(format!(
                "invalid geometry {}x{}, {} mask slots, {} sprites",
                self.height, self.width, self.mask_slots, self.max_sprites
            )));
        }
        Ok(())
    }

    fn encode(&self, scene: &LabeledScene) -> Result<Vec<u8>> {
        if (scene.height, scene.width) != (self.height, self.width) || scene.mask_slots > self.mask_slots {
            return Err(MonetError::Shape(format!(
                "scene {}x{} with {} mask slots does not fit a {}x{} dataset with {}",
                scene.height, scene.width, scene.mask_slots, self.height, self.width, self.mask_slots
            )));
        }
        if scene.sprites.len() > self.max_sprites {
            return Err(MonetError::Shape(format!(
                "scene has {} sprites, dataset allows {}",
                scene.sprites.len(),
                self.max_sprites
            )));
        }
        let mut out = Vec::with_capacity(self.record_bytes());
        out.push(scene.sprites.len() as u8);
        out.extend_from_slice(&scene.background);
        for j in 0..self.max_sprites {
            match scene.sprites.get(j) {
                Some(s) => {
                    out.push(s.shape.id());
                    out.extend_from_slice(&s.color);
                    for v in [s.x, s.y, s.scale, s.orientation] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => out.extend_from_slice(&[0u8; SPRITE_BYTES]),
            }
        }
        out.extend_from_slice(&scene.pixels);
        let plane = self.plane_bytes();
        for k in 0..self.mask_slots {
            let mut bits = vec![0u8; plane];
            for (p, &l) in scene.labels.iter().enumerate() {
                if l as usize == k {
                    bits[p / 8] |= 1 << (p % 8);
                }
            }
            out.extend_from_slice(&bits);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    fn decode(&self, index: u64, bytes: &[u8]) -> Result<LabeledScene> {
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(MonetError::Checksum { what: format!("record {index}") });
        }
        let bad = |detail: String| MonetError::DatasetRecord { index, detail };
        let count = body[0] as usize;
        if count > self.max_sprites {
            return Err(bad(format!("{count} sprites exceed the header maximum {}", self.max_sprites)));
        }
        let background = [body[1], body[2], body[3]];
        let mut pos = 4;
        let mut sprites = Vec::with_capacity(count);
        for j in 0..self.max_sprites {
            let rec = &body[pos..pos + SPRITE_BYTES];
            pos += SPRITE_BYTES;
            if j >= count {
                continue;
            }
            let shape = SpriteShape::from_id(rec[0]).ok_or_else(|| bad(format!("unknown shape id {}", rec[0])))?;
            let f = |i: usize| f64::from_le_bytes(rec[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes"));
            sprites.push(Sprite {
                shape,
                color: [rec[1], rec[2], rec[3]],
                x: f(0),
                y: f(1),
                scale: f(2),
                orientation: f(3),
            });
        }
        let npix = self.height * self.width;
        let pixels = body[pos..pos + npix * 3].to_vec();
        pos += npix * 3;
        let plane = self.plane_bytes();
        let mut labels = vec![u8::MAX; npix];
        for k in 0..self.mask_slots {
            let bits = &body[pos + k * plane..pos + (k + 1) * plane];
            for (p, l) in labels.iter_mut().enumerate() {
                if bits[p / 8] >> (p % 8) & 1 == 1 {
                    if *l != u8::MAX {
                        return Err(bad(format!("pixel {p} is claimed by masks {} and {k}", *l)));
                    }
                    *l = k as u8;
                }
            }
        }
        if let Some(p) = labels.iter().position(|&l| l == u8::MAX) {
            return Err(bad(format!("pixel {p} is in no mask")));
        }
        LabeledScene::new(self.height, self.width, pixels, labels, self.mask_slots, background, sprites)
    }
}

/// Streams scenes to a new dataset file. The header's record count is a
/// promise checked by [`DatasetWriter::finish`].
pub struct DatasetWriter {
    path: PathBuf,
    header: DatasetHeader,
    out: BufWriter<File>,
    written: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, header: DatasetHeader) -> Result<Self> {
        header.validate()?;
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| MonetError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let mut line = serde_json::to_vec(&header)?;
        line.push(b'\n');
        out.write_all(&line).map_err(|e| MonetError::io(&path, e))?;
        Ok(Self { path, header, out, written: 0 })
    }

    pub fn write(&mut self, scene: &LabeledScene) -> Result<()> {
        if self.written == self.header.count {
            return Err(MonetError::Argument(format!("dataset header declares only {} records", self.header.count)));
        }
        let bytes = self.header.encode(scene)?;
        self.out.write_all(&bytes).map_err(|e| MonetError::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetHeader> {
        if self.written != self.header.count {
            return Err(MonetError::Argument(format!(
                "wrote {} records but the header declares {}",
                self.written, self.header.count
            )));
        }
        self.out.flush().map_err(|e| MonetError::io(&self.path, e))?;
        self.out.get_ref().sync_all().map_err(|e| MonetError::io(&self.path, e))?;
        Ok(self.header)
    }

    /// Writes a complete file in one call.
    pub fn write_all<'a>(
        path: impl AsRef<Path>,
        header: DatasetHeader,
        scenes: impl IntoIterator<Item = &'a LabeledScene>,
    ) -> Result<DatasetHeader> {
        let mut w = Self::create(path, header)?;
        for s in scenes {
            w.write(s)?;
        }
        w.finish()
    }
}

/// Random-access reader; `read` may be called from several threads.
pub struct DatasetReader {
    path: PathBuf,
    header: DatasetHeader,
    data_start: u64,
    file: Mutex<File>,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |e| MonetError::io(&path, e);
        let file = File::open(&path).map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        let mut line = Vec::new();
        BufReader::new(file.try_clone().map_err(io)?).take(MAX_HEADER).read_until(b'\n', &mut line).map_err(io)?;
        if line.last() != Some(&b'\n') {
            return Err(MonetError::DatasetHeader(format!("{} has no header line", path.display())));
        }
        let header: DatasetHeader = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| MonetError::DatasetHeader(format!("{}: {e}", path.display())))?;
        header.validate()?;
        let data_start = line.len() as u64;
        let expected = data_start + header.count * header.record_bytes() as u64;
        if len < expected {
            return Err(MonetError::Truncated { path, expected, found: len });
        }
        if len > expected {
            return Err(MonetError::DatasetHeader(format!(
                "{} has {} bytes after the last declared record",
                path.display(),
                len - expected
            )));
        }
        Ok(Self { path, header, data_start, file: Mutex::new(file) })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&self, index: u64) -> Result<LabeledScene> {
        if index >= self.header.count {
            return Err(MonetError::Argument(format!("record {index} out of range 0..{}", self.header.count)));
        }
        let n = self.header.record_bytes();
        let mut buf = vec![0u8; n];
        {
            let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(self.data_start + index * n as u64)).map_err(|e| MonetError::io(&self.path, e))?;
            f.read_exact(&mut buf).map_err(|e| MonetError::io(&self.path, e))?;
        }
        self.header.decode(index, &buf)
    }

    /// Sequential pass over every record with its own file handle.
    pub fn iter(&self) -> Result<ScenesIter> {
        let mut file = File::open(&self.path).map_err(|e| MonetError::io(&self.path, e))?;
        file.seek(SeekFrom::Start(self.data_start)).map_err(|e| MonetError::io(&self.path, e))?;
        Ok(ScenesIter { path: self.path.clone(), header: self.header.clone(), reader: BufReader::new(file), next: 0 })
    }

    pub fn read_all(&self) -> Result<Vec<LabeledScene>> {
        self.iter()?.collect()
    }
}

pub struct ScenesIter {
    path: PathBuf,
    header: DatasetHeader,
    reader: BufReader<File>,
    next: u64,
}

impl Iterator for ScenesIter {
    type Item = Result<LabeledScene>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.count {
            return None;
        }
        let mut buf = vec![0u8; self.header.record_bytes()];
        let index = self.next;
        self.next += 1;
        Some(
            self.reader
                .read_exact(&mut buf)
                .map_err(|e| MonetError::io(&self.path, e))
                .and_then(|_| self.header.decode(index, &buf)),
        )
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.header.count - self.next) as usize;
        (n, Some(n))
    }
}
