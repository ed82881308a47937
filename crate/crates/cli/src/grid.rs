//! Tile rendered characters into a PNG contact sheet.

use scrawl_core::trajectory::Raster;
use std::path::Path;

/// Grid with `cols` tiles per row and `ceil(n / cols)` rows; missing cells
/// stay black.
pub fn save_grid(tiles: &[Raster], cols: usize, path: &Path) -> anyhow::Result<()> {
    anyhow::ensure!(!tiles.is_empty(), "no tiles to render");
    anyhow::ensure!(cols >= 1, "need at least one column");
    let size = tiles[0].size;
    anyhow::ensure!(
        tiles.iter().all(|t| t.size == size),
        "all tiles must share one size"
    );
    let rows = tiles.len().div_ceil(cols);
    let mut img = image::GrayImage::new((cols * size) as u32, (rows * size) as u32);
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..size {
            for x in 0..size {
                img.put_pixel(
                    (c * size + x) as u32,
                    (r * size + y) as u32,
                    image::Luma([tile.get(x, y)]),
                );
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Grid geometry used by `save_grid`, exposed for tests.
pub fn grid_dims(n: usize, cols: usize) -> (usize, usize) {
    (n.div_ceil(cols), cols)
}
