//! PNG sample files and the on-disk dataset layout
//! `<root>/<class>/<split>/<id>_img.png` + `<id>_mask.png`, indexed by
//! `<root>/manifest.csv` (`id,class,split,seed`).

use std::fs;
use std::io::{self, BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::{PhantomClass, SampleBatch, Split};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,class,split,seed";

/// Tracks how many bytes the decoder has pulled, so failures can name an offset.
struct Counting<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, io::Error::new(io::ErrorKind::Other, e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Decodes an 8-bit PNG with the given colour type into `(width, height, bytes)`.
fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Counting {
        inner: BufReader::new(file),
        pos: 0,
    };
    let (info, buf) = {
        let decoder = png::Decoder::new(&mut reader);
        let mut r = match decoder.read_info() {
            Ok(r) => r,
            Err(e) => return Err(parse_err(path, reader.pos, e.to_string())),
        };
        let mut buf = vec![0; r.output_buffer_size()];
        match r.next_frame(&mut buf) {
            Ok(info) => (info, buf),
            Err(e) => {
                drop(r);
                return Err(parse_err(path, reader.pos, e.to_string()));
            }
        }
    };
    if info.bit_depth != png::BitDepth::Eight || info.color_type != want {
        return Err(parse_err(
            path,
            0,
            format!("expected 8-bit {want:?}, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok((w, h, buf[..info.buffer_size()].to_vec()))
}

/// Image `(1, 3, H, W)` as 8-bit RGB.
pub fn write_image(path: &Path, image: &Tensor4) -> Result<()> {
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(Error::config(format!("image has {c} channels, expected 3")));
    }
    let d = image.data();
    let bytes: Vec<u8> = (0..h * w)
        .flat_map(|p| (0..3).map(move |ch| quantize(d[ch * h * w + p])))
        .collect();
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Mask `(1, 1, H, W)` as 8-bit grayscale with values {0, 255}.
pub fn write_mask(path: &Path, mask: &Tensor4) -> Result<()> {
    let [_, c, h, w] = mask.shape();
    if c != 1 {
        return Err(Error::config(format!("mask has {c} channels, expected 1")));
    }
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}

/// Raw 8-bit grayscale, row-major.
pub fn write_gray(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Grayscale, bytes)
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, d) = read_png(path, png::ColorType::Grayscale)?;
    Ok((h, w, d))
}

pub fn read_image(path: &Path) -> Result<Tensor4> {
    let (w, h, d) = read_png(path, png::ColorType::Rgb)?;
    Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| d[(y * w + x) * 3 + c] as f64 / 255.0))
}

pub fn read_mask(path: &Path) -> Result<Tensor4> {
    let (w, h, d) = read_png(path, png::ColorType::Grayscale)?;
    if let Some(i) = d.iter().position(|&v| v != 0 && v != 255) {
        return Err(parse_err(path, 0, format!("mask pixel {i} has value {}, expected 0 or 255", d[i])));
    }
    Ok(Tensor4::from_fn([1, 1, h, w], |[_, _, y, x]| (d[y * w + x] == 255) as u8 as f64))
}

pub fn sample_dir(root: &Path, class: PhantomClass, split: Split) -> PathBuf {
    root.join(class.name()).join(split.name())
}

pub fn write_sample(dir: &Path, id: &str, image: &Tensor4, mask: &Tensor4) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_image(&dir.join(format!("{id}_img.png")), image)?;
    write_mask(&dir.join(format!("{id}_mask.png")), mask)
}

pub fn read_sample(dir: &Path, id: &str) -> Result<(Tensor4, Tensor4)> {
    let image = read_image(&dir.join(format!("{id}_img.png")))?;
    let mask = read_mask(&dir.join(format!("{id}_mask.png")))?;
    if image.h() != mask.h() || image.w() != mask.w() {
        return Err(Error::config(format!("{id}: image and mask sizes differ")));
    }
    Ok((image, mask))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub class: PhantomClass,
    pub split: Split,
    pub seed: u64,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if n == 0 {
            if line != MANIFEST_HEADER {
                return Err(parse_err(&path, at, format!("expected header `{MANIFEST_HEADER}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(&path, at, format!("expected 4 fields, found {}", f.len())));
        }
        let bad = |e: Error| parse_err(&path, at, e.to_string());
        rows.push(ManifestRow {
            id: f[0].to_string(),
            class: f[1].parse().map_err(bad)?,
            split: f[2].parse().map_err(bad)?,
            seed: f[3]
                .parse()
                .map_err(|_| parse_err(&path, at, format!("bad seed `{}`", f[3])))?,
        });
    }
    Ok(rows)
}

/// Writes a batch under the layout and appends its rows to the manifest.
pub fn write_split(root: &Path, class: PhantomClass, split: Split, seed: u64, batch: &SampleBatch) -> Result<()> {
    let dir = sample_dir(root, class, split);
    for i in 0..batch.len() {
        write_sample(&dir, &batch.ids[i], &batch.image(i), &batch.mask(i))?;
    }
    let path = root.join(MANIFEST);
    let mut text = if path.exists() {
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?
    } else {
        format!("{MANIFEST_HEADER}\n")
    };
    for id in &batch.ids {
        text.push_str(&format!("{id},{},{},{seed}\n", class.name(), split.name()));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads every manifest entry of `(class, split)`, in manifest order.
pub fn read_split(root: &Path, class: PhantomClass, split: Split) -> Result<SampleBatch> {
    let dir = sample_dir(root, class, split);
    let ids: Vec<String> = read_manifest(root)?
        .into_iter()
        .filter(|r| r.class == class && r.split == split)
        .map(|r| r.id)
        .collect();
    if ids.is_empty() {
        return Err(Error::config(format!(
            "{}: no {} {} samples listed",
            root.display(),
            class.name(),
            split.name()
        )));
    }
    let mut images = Vec::with_capacity(ids.len());
    let mut masks = Vec::with_capacity(ids.len());
    for id in &ids {
        let (i, m) = read_sample(&dir, id)?;
        images.push(i);
        masks.push(m);
    }
    SampleBatch::new(
        Tensor4::stack(&images.iter().collect::<Vec<_>>())?,
        Tensor4::stack(&masks.iter().collect::<Vec<_>>())?,
        ids,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, PhantomSpec};

    #[test]
    fn round_trip_mask_exact_image_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_split(&PhantomSpec::new(PhantomClass::Iris, (24, 32), 1), Split::Test, 2).unwrap();
        write_split(dir.path(), PhantomClass::Iris, Split::Test, 1, &b).unwrap();
        let back = read_split(dir.path(), PhantomClass::Iris, Split::Test).unwrap();
        assert_eq!(back.ids, b.ids);
        assert_eq!(back.masks, b.masks);
        for (a, r) in b.images.data().iter().zip(back.images.data()) {
            assert!((a - r).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let (_, _, raw) = read_gray(&sample_dir(dir.path(), PhantomClass::Iris, Split::Test).join(format!("{}_mask.png", b.ids[0]))).unwrap();
        assert!(raw.iter().all(|&v| v == 0 || v == 255));
        let rows = read_manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].split, Split::Test);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x_mask.png");
        fs::write(&p, b"\x89PNG\r\n\x1a\nthis is not a chunk").unwrap();
        match read_mask(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset > 0),
            e => panic!("{e}"),
        }
        // Valid PNG, wrong values.
        write_gray(&p, 1, 2, &[0, 7]).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::Parse { .. })));
        fs::write(dir.path().join(MANIFEST), "id,class,split,seed\na,pupil,train\n").unwrap();
        match read_manifest(dir.path()).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, MANIFEST_HEADER.len() as u64 + 1),
            e => panic!("{e}"),
        }
    }
}
