use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

const BAR: u32 = 24;
const GAP: u32 = 8;
const MARGIN: u32 = 16;
const HEIGHT: u32 = 200;

/// One stacked bar per row of `counts` (cluster x class), heights proportional to row totals.
/// Row `noise_row` is drawn after a wider gap. Colours cycle through a fixed palette by class.
pub fn stacked_bars(counts: &[Vec<usize>], noise_row: usize) -> RgbImage {
    let rows: Vec<(usize, &Vec<usize>)> = counts
        .iter()
        .enumerate()
        .filter(|(r, c)| *r != noise_row || c.iter().sum::<usize>() > 0)
        .collect();
    let n = rows.len().max(1) as u32;
    let width = 2 * MARGIN + n * (BAR + GAP) + GAP;
    let total_height = HEIGHT + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, total_height, Rgb([255, 255, 255]));
    let max = rows.iter().map(|(_, c)| c.iter().sum::<usize>()).max().unwrap_or(0).max(1);
    let baseline = MARGIN + HEIGHT;
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, baseline, Rgb([0, 0, 0]));
    }
    for (slot, (r, c)) in rows.iter().enumerate() {
        let mut x0 = MARGIN + GAP + slot as u32 * (BAR + GAP);
        if *r == noise_row {
            x0 += GAP / 2;
        }
        let mut top = baseline;
        let mut acc = 0usize;
        for (class, &v) in c.iter().enumerate() {
            acc += v;
            let y = baseline - (acc as u64 * HEIGHT as u64 / max as u64) as u32;
            let colour = if *r == noise_row {
                let [a, b, d] = PALETTE[class % PALETTE.len()];
                Rgb([a / 2 + 100, b / 2 + 100, d / 2 + 100])
            } else {
                Rgb(PALETTE[class % PALETTE.len()])
            };
            for yy in y..top {
                for xx in x0..x0 + BAR {
                    img.put_pixel(xx, yy, colour);
                }
            }
            top = y;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tallest_bar_reaches_the_top() {
        let img = stacked_bars(&[vec![3, 1], vec![0, 2], vec![0, 0]], 2);
        assert_eq!(img.width(), 2 * MARGIN + 2 * (BAR + GAP) + GAP);
        let x = MARGIN + GAP;
        assert_eq!(*img.get_pixel(x, MARGIN), Rgb(PALETTE[1]));
        assert_eq!(*img.get_pixel(x, MARGIN + HEIGHT - 1), Rgb(PALETTE[0]));
        // the second bar is half as tall
        let x = MARGIN + GAP + BAR + GAP;
        assert_eq!(*img.get_pixel(x, MARGIN + HEIGHT / 2 - 1), Rgb([255, 255, 255]));
        assert_eq!(*img.get_pixel(x, MARGIN + HEIGHT / 2), Rgb(PALETTE[1]));
    }
}
