//! Dependency-free image output (binary PPM) and atomic file writes.

use std::path::Path;

use crate::sggraph::SignatureGraph;
use crate::Result;

/// Write bytes to a temporary sibling, then rename over the target so no
/// partially written file is ever observable.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
            std::process::id()
        )),
        None => Path::new(&format!(".out.tmp-{}", std::process::id())).to_path_buf(),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// RGB raster with a binary PPM (P6) encoder.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![[0, 0, 0]; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = rgb;
        }
    }

    /// 1-px line via Bresenham.
    pub fn line(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]) {
        let (mut x0, mut y0) = (x0 as i64, y0 as i64);
        let (x1, y1) = (x1 as i64, y1 as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            if x0 >= 0 && y0 >= 0 {
                self.set(x0 as usize, y0 as usize, rgb);
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }
}

/// Render a feature map with its signature graph: grayscale background,
/// green edges, nodes as 3x3 red squares.
pub fn render_graph(map: &[f64], height: usize, width: usize, graph: &SignatureGraph) -> Canvas {
    let mut canvas = Canvas::new(width, height);
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for y in 0..height {
        for x in 0..width {
            let g = (255.0 * (map[y * width + x] - lo) / span).round() as u8;
            canvas.set(x, y, [g, g, g]);
        }
    }
    for &(a, b) in &graph.edges {
        let na = &graph.nodes[a];
        let nb = &graph.nodes[b];
        canvas.line(na.x, na.y, nb.x, nb.y, [0, 200, 0]);
    }
    for node in &graph.nodes {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (node.x as i64 + dx, node.y as i64 + dy);
                if x >= 0 && y >= 0 {
                    canvas.set(x as usize, y as usize, [255, 0, 0]);
                }
            }
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_format() {
        let c = Canvas::new(3, 2);
        let bytes = c.encode_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 3 * 2 * 3);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // no temp files left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
