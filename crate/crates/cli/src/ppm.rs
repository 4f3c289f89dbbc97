//! Minimal binary PPM (P6) output for eyeballing frames.

use std::io::Write;
use std::path::Path;

use anyhow::{ensure, Result};
use vdiff_core::{Image, VideoLatent};

/// Encodes an RGB frame as P6 after clamping values to `[0, 1]`.
pub fn encode_ppm(frame: &Image) -> Result<Vec<u8>> {
    ensure!(frame.c == 3, "PPM needs 3 channels, frame has {}", frame.c);
    let mut out = format!("P6\n{} {}\n255\n", frame.w, frame.h).into_bytes();
    out.reserve(3 * frame.h * frame.w);
    for y in 0..frame.h {
        for x in 0..frame.w {
            for c in 0..3 {
                out.push((frame.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Writes `frame_{k:04}.ppm` for every frame of batch entry 0; returns the count.
pub fn dump_frames(video: &VideoLatent, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let f = video.dims().f;
    for k in 0..f {
        let mut file = std::fs::File::create(dir.join(format!("frame_{k:04}.ppm")))?;
        file.write_all(&encode_ppm(&video.frame(0, k))?)?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_pixels() {
        let img = Image::new(3, 1, 2, vec![1.0, 0.0, 0.5, 2.0, -1.0, 0.25]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 128, 0, 0, 255, 64]);
    }

    #[test]
    fn gray_frames_are_rejected() {
        assert!(encode_ppm(&Image::filled(1, 2, 2, 0.5)).is_err());
    }
}
