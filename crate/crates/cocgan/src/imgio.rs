//! Image output: binary PGM/PPM (bit-exact, dependency-free) with optional
//! PNG copies, sample grids, and cluster-assignment overlays.

use crate::cluster::ClusterAssignment;
use crate::error::Error;
use crate::model::{IMAGE_PIXELS, IMAGE_SIDE};
use std::io::Write;
use std::path::Path;

/// Fixed palette: cluster index -> RGB, so overlays are comparable across
/// runs. Wraps after 16 entries.
pub const CLUSTER_PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// `[-1, 1]` float to byte.
pub fn to_byte(v: f32) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// Grayscale image, 8-bit.
#[derive(Clone, Debug)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// RGB image, 8-bit per channel.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), Error> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), Error> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

/// Minimal PGM/PPM reader for the formats this crate writes (used by tests
/// and the visualization cross-check).
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), Error> {
    let bytes = std::fs::read(path)?;
    let header_err = || Error::Load(format!("{}: not a binary PGM/PPM", path.display()));
    if bytes.len() < 2 {
        return Err(header_err());
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(header_err()),
    };
    // three whitespace-separated fields after the magic: width height maxval
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err());
        }
        let s = std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?;
        fields.push(s.parse::<usize>().map_err(|_| header_err())?);
    }
    if fields.len() != 3 || fields[2] != 255 || pos >= bytes.len() {
        return Err(header_err());
    }
    pos += 1; // single whitespace after maxval
    let (w, h) = (fields[0], fields[1]);
    let need = w * h * channels;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Load(format!("{}: truncated pixel payload", path.display())))?;
    Ok((w, h, channels, data.to_vec()))
}

pub fn write_png_gray(path: &Path, img: &GrayImage) -> Result<(), Error> {
    let f = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_image_data(&img.pixels)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<(), Error> {
    let f = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_image_data(&img.pixels)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Tile a batch of `[-1,1]` images (`rows x cols`, row-major batch order,
/// single channel) into one grid image with 2px separators.
pub fn sample_grid(images: &[f32], rows: usize, cols: usize) -> GrayImage {
    assert!(images.len() >= rows * cols * IMAGE_PIXELS, "not enough images for grid");
    let pad = 2;
    let w = cols * IMAGE_SIDE + (cols + 1) * pad;
    let h = rows * IMAGE_SIDE + (rows + 1) * pad;
    let mut pixels = vec![0u8; w * h];
    for r in 0..rows {
        for c in 0..cols {
            let img = &images[(r * cols + c) * IMAGE_PIXELS..(r * cols + c + 1) * IMAGE_PIXELS];
            let oy = pad + r * (IMAGE_SIDE + pad);
            let ox = pad + c * (IMAGE_SIDE + pad);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    pixels[(oy + y) * w + ox + x] = to_byte(img[y * IMAGE_SIDE + x]);
                }
            }
        }
    }
    GrayImage { width: w, height: h, pixels }
}

/// Paired panel: grayscale input on the left, solid cluster colors on the
/// right. The assignment covers the post-reduction grid (`grid_side^2`
/// points); each point colors its corresponding pixel block.
pub fn cluster_overlay_pair(
    image: &[f32],
    assign: &ClusterAssignment,
    grid_side: usize,
) -> Result<RgbImage, Error> {
    if assign.assignment.len() != grid_side * grid_side {
        return Err(Error::Contract(format!(
            "assignment covers {} points, expected {}x{grid_side} grid",
            assign.assignment.len(),
            grid_side
        )));
    }
    if IMAGE_SIDE % grid_side != 0 {
        return Err(Error::Contract(format!(
            "grid side {grid_side} does not divide image side {IMAGE_SIDE}"
        )));
    }
    let scale = IMAGE_SIDE / grid_side;
    let pad = 2;
    let w = 2 * IMAGE_SIDE + 3 * pad;
    let h = IMAGE_SIDE + 2 * pad;
    let mut pixels = vec![0u8; w * h * 3];
    // left: input
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let v = to_byte(image[y * IMAGE_SIDE + x]);
            let base = ((pad + y) * w + pad + x) * 3;
            pixels[base] = v;
            pixels[base + 1] = v;
            pixels[base + 2] = v;
        }
    }
    // right: cluster colors
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let point = (y / scale) * grid_side + x / scale;
            let color = CLUSTER_PALETTE[assign.assignment[point] as usize % CLUSTER_PALETTE.len()];
            let base = ((pad + y) * w + 2 * pad + IMAGE_SIDE + x) * 3;
            pixels[base..base + 3].copy_from_slice(&color);
        }
    }
    Ok(RgbImage { width: w, height: h, pixels })
}

/// Stack RGB panels vertically with 2px separators.
pub fn stack_panels(panels: &[RgbImage]) -> RgbImage {
    assert!(!panels.is_empty());
    let w = panels[0].width;
    let pad = 2;
    let h: usize = panels.iter().map(|p| p.height).sum::<usize>() + pad * (panels.len() - 1);
    let mut pixels = vec![0u8; w * h * 3];
    let mut oy = 0;
    for p in panels {
        assert_eq!(p.width, w, "panel widths differ");
        for y in 0..p.height {
            let dst = ((oy + y) * w) * 3;
            let src = (y * p.width) * 3;
            pixels[dst..dst + w * 3].copy_from_slice(&p.pixels[src..src + w * 3]);
        }
        oy += p.height + pad;
    }
    RgbImage { width: w, height: h, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128); // 127.5 rounds up
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let img = GrayImage { width: 3, height: 2, pixels: vec![0, 10, 20, 30, 40, 255] };
        write_pgm(&p, &img).unwrap();
        let (w, h, ch, data) = read_pnm(&p).unwrap();
        assert_eq!((w, h, ch), (3, 2, 1));
        assert_eq!(data, img.pixels);
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        let img = RgbImage { width: 2, height: 1, pixels: vec![1, 2, 3, 4, 5, 6] };
        write_ppm(&p, &img).unwrap();
        let (w, h, ch, data) = read_pnm(&p).unwrap();
        assert_eq!((w, h, ch), (2, 1, 3));
        assert_eq!(data, img.pixels);
    }

    #[test]
    fn grid_dimensions() {
        let imgs = vec![0.0f32; 6 * IMAGE_PIXELS];
        let g = sample_grid(&imgs, 2, 3);
        assert_eq!(g.width, 3 * 28 + 4 * 2);
        assert_eq!(g.height, 2 * 28 + 3 * 2);
    }

    #[test]
    fn overlay_color_blocks_match_assignment() {
        let assignment: Vec<u32> = (0..196).map(|i| (i % 4) as u32).collect();
        let mut members = vec![Vec::new(); 4];
        for (i, &a) in assignment.iter().enumerate() {
            members[a as usize].push(i as u32);
        }
        let assign = ClusterAssignment { n_centers: 4, assignment: assignment.clone(), members };
        let img = vec![0.0f32; IMAGE_PIXELS];
        let pair = cluster_overlay_pair(&img, &assign, 14).unwrap();
        // sample the first pixel of each 2x2 block on the right panel
        let pad = 2;
        for gy in 0..14 {
            for gx in 0..14 {
                let y = pad + gy * 2;
                let x = 2 * pad + 28 + gx * 2;
                let base = (y * pair.width + x) * 3;
                let want = CLUSTER_PALETTE[assignment[gy * 14 + gx] as usize % 16];
                assert_eq!(&pair.pixels[base..base + 3], &want);
            }
        }
    }
}
