//! Class-map rendering to binary PPM (and PNG with the `png` feature).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ClassGrid;
use crate::io::write_atomic;

pub type Rgb = [u8; 3];
pub type Palette = BTreeMap<u8, Rgb>;

/// Color used for nodata cells unless the palette maps the nodata code itself.
pub const NODATA_RGB: Rgb = [0, 0, 0];

/// Water-map legend codes: water/land inside or beyond the training timeframe.
pub mod water_map {
    pub const LAND_IN_TRAIN: u8 = 0;
    pub const WATER_IN_TRAIN: u8 = 1;
    pub const LAND_OUT_OF_TRAIN: u8 = 2;
    pub const WATER_OUT_OF_TRAIN: u8 = 3;

    pub fn code(water: bool, in_train: bool) -> u8 {
        match (water, in_train) {
            (false, true) => LAND_IN_TRAIN,
            (true, true) => WATER_IN_TRAIN,
            (false, false) => LAND_OUT_OF_TRAIN,
            (true, false) => WATER_OUT_OF_TRAIN,
        }
    }
}

/// Change-map codes. Pixels without a breakpoint get `NO_BREAK`.
pub mod change_map {
    pub const NO_BREAK: u8 = 0;
    pub const DECREASE: u8 = 1;
    pub const UNCHANGED: u8 = 2;
    pub const INCREASE: u8 = 3;
}

/// Dark blue / dark brown inside the training timeframe, lighter shades outside it.
pub fn water_map_palette() -> Palette {
    use water_map::*;
    BTreeMap::from([
        (LAND_IN_TRAIN, [101, 67, 33]),
        (WATER_IN_TRAIN, [0, 48, 160]),
        (LAND_OUT_OF_TRAIN, [181, 136, 84]),
        (WATER_OUT_OF_TRAIN, [110, 170, 240]),
    ])
}

pub fn change_map_palette() -> Palette {
    use change_map::*;
    BTreeMap::from([
        (NO_BREAK, [255, 255, 255]),
        (DECREASE, [165, 60, 40]),
        (UNCHANGED, [128, 128, 128]),
        (INCREASE, [30, 90, 220]),
    ])
}

/// Encodes the class grid as a binary P6 image, one pixel per cell.
pub fn encode_ppm(grid: &ClassGrid, palette: &Palette) -> Result<Vec<u8>> {
    let rgb = colorize(grid, palette)?;
    let mut out = format!("P6\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

fn colorize(grid: &ClassGrid, palette: &Palette) -> Result<Vec<u8>> {
    let mut rgb = Vec::with_capacity(grid.len() * 3);
    for &code in grid.samples() {
        let color = match palette.get(&code) {
            Some(c) => *c,
            None if grid.is_nodata(code) => NODATA_RGB,
            None => return Err(Error::Data(format!("class code {code} has no palette entry"))),
        };
        rgb.extend_from_slice(&color);
    }
    Ok(rgb)
}

/// Writes `path` as PPM. With the `png` feature a PNG with the same stem is written too.
pub fn render_map(grid: &ClassGrid, palette: &Palette, path: &Path) -> Result<()> {
    write_atomic(path, &encode_ppm(grid, palette)?)?;
    #[cfg(feature = "png")]
    write_png(grid, palette, &path.with_extension("png"))?;
    Ok(())
}

#[cfg(feature = "png")]
fn write_png(grid: &ClassGrid, palette: &Palette, path: &Path) -> Result<()> {
    let rgb = colorize(grid, palette)?;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, grid.width() as u32, grid.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GeoTransform, Grid, NODATA_CLASS};

    #[test]
    fn uniform_blue() {
        let g = Grid::filled(3, 2, GeoTransform::default(), NODATA_CLASS, 1u8).unwrap();
        let ppm = encode_ppm(&g, &BTreeMap::from([(1, [0, 0, 255])])).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert!(ppm[header.len()..].chunks(3).all(|px| px == [0, 0, 255]));
        assert_eq!(ppm.len(), header.len() + 18);
    }

    #[test]
    fn unmapped_code_errors_but_nodata_is_allowed() {
        let g = Grid::new(2, 1, GeoTransform::default(), NODATA_CLASS, vec![1u8, 7]).unwrap();
        assert!(encode_ppm(&g, &BTreeMap::from([(1, [0, 0, 255])])).is_err());
        let g = Grid::new(2, 1, GeoTransform::default(), NODATA_CLASS, vec![1u8, 255]).unwrap();
        let ppm = encode_ppm(&g, &BTreeMap::from([(1, [0, 0, 255])])).unwrap();
        assert_eq!(&ppm[ppm.len() - 3..], &NODATA_RGB);
    }

    fn luminance(c: Rgb) -> u32 {
        c.iter().map(|&v| v as u32).sum()
    }

    #[test]
    fn water_legend_is_distinct_and_lighter_out_of_train() {
        use water_map::*;
        let p = water_map_palette();
        let colors: std::collections::BTreeSet<Rgb> = p.values().copied().collect();
        assert_eq!(colors.len(), 4);
        assert!(luminance(p[&WATER_OUT_OF_TRAIN]) > luminance(p[&WATER_IN_TRAIN]));
        assert!(luminance(p[&LAND_OUT_OF_TRAIN]) > luminance(p[&LAND_IN_TRAIN]));
        // water is blue-dominant, land is not
        for code in [WATER_IN_TRAIN, WATER_OUT_OF_TRAIN] {
            assert!(p[&code][2] > p[&code][0]);
        }
        for code in [LAND_IN_TRAIN, LAND_OUT_OF_TRAIN] {
            assert!(p[&code][0] > p[&code][2]);
        }
        let codes = vec![LAND_IN_TRAIN, WATER_IN_TRAIN, LAND_OUT_OF_TRAIN, WATER_OUT_OF_TRAIN];
        let g = Grid::new(4, 1, GeoTransform::default(), NODATA_CLASS, codes).unwrap();
        let a = encode_ppm(&g, &p).unwrap();
        assert_eq!(a, encode_ppm(&g, &p).unwrap());
    }

    #[test]
    fn render_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::filled(2, 2, GeoTransform::default(), NODATA_CLASS, 2u8).unwrap();
        let path = dir.path().join("m.ppm");
        render_map(&g, &change_map_palette(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), encode_ppm(&g, &change_map_palette()).unwrap());
    }
}
