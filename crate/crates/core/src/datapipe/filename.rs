//! Identity and camera encoded in benchmark image filenames.

use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

fn market_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(-1|\d{4})_c(\d+)s(\d+)_(\d+)_(\d+)\.([A-Za-z0-9]+)$").expect("valid regex")
    })
}

fn generic_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(-1|\d+)_c(\d+)(?:[_s].*)?\.([A-Za-z0-9]+)$").expect("valid regex"))
}

/// Parses `{pid}_c{cam}s{seq}_{frame}_{bbox}.{ext}` (Market-1501).
/// Returns the identity (`-1` for junk) and the 1-based camera index.
pub fn parse_market_filename(name: &str) -> Result<(i64, usize)> {
    let caps = market_pattern()
        .captures(name)
        .ok_or_else(|| Error::MalformedFilename(name.to_string()))?;
    parse_ids(name, &caps[1], &caps[2])
}

/// Parses `{pid}_c{cam}_...` names used by DukeMTMC-reID and the CUHK03
/// new-protocol release.
pub fn parse_generic_filename(name: &str) -> Result<(i64, usize)> {
    let caps = generic_pattern()
        .captures(name)
        .ok_or_else(|| Error::MalformedFilename(name.to_string()))?;
    parse_ids(name, &caps[1], &caps[2])
}

fn parse_ids(name: &str, pid: &str, cam: &str) -> Result<(i64, usize)> {
    let bad = || Error::MalformedFilename(name.to_string());
    let pid: i64 = pid.parse().map_err(|_| bad())?;
    let cam: usize = cam.parse().map_err(|_| bad())?;
    if cam == 0 {
        return Err(bad());
    }
    Ok((pid, cam))
}

/// Inverse of [`parse_market_filename`].
pub fn format_market_filename(
    pid: i64,
    cam: usize,
    seq: usize,
    frame: usize,
    bbox: usize,
    ext: &str,
) -> Result<String> {
    let pid = match pid {
        -1 => "-1".to_string(),
        0..=9999 => format!("{pid:04}"),
        _ => return Err(Error::InvalidArgument(format!("pid {pid} has no 4-digit form"))),
    };
    if cam == 0 {
        return Err(Error::InvalidArgument("camera index is 1-based".into()));
    }
    Ok(format!("{pid}_c{cam}s{seq}_{frame:06}_{bbox:02}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn market_examples() {
        assert_eq!(parse_market_filename("0002_c1s1_000451_03.jpg").unwrap(), (2, 1));
        assert_eq!(parse_market_filename("-1_c3s2_000100_00.jpg").unwrap(), (-1, 3));
        assert_eq!(parse_market_filename("1501_c6s3_012345_01.jpg").unwrap(), (1501, 6));
    }

    #[test]
    fn market_rejects_other_shapes() {
        for name in [
            "Thumbs.db",
            "002_c1s1_000451_03.jpg",
            "0002_c1_000451_03.jpg",
            "0002_c1s1_000451_03",
            "-2_c1s1_000451_03.jpg",
        ] {
            assert!(matches!(parse_market_filename(name), Err(Error::MalformedFilename(_))), "{name}");
        }
    }

    #[test]
    fn generic_names() {
        assert_eq!(parse_generic_filename("0001_c2_f0046182.jpg").unwrap(), (1, 2));
        assert_eq!(parse_generic_filename("1367_c2_21.png").unwrap(), (1367, 2));
        assert_eq!(parse_generic_filename("0005_c1s1_000001_00.png").unwrap(), (5, 1));
        assert!(parse_generic_filename("readme.txt").is_err());
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(
            pid in prop_oneof![Just(-1i64), 0i64..=9999],
            cam in 1usize..10,
            seq in 1usize..10,
            frame in 0usize..999_999,
            bbox in 0usize..99,
        ) {
            let name = format_market_filename(pid, cam, seq, frame, bbox, "jpg").unwrap();
            prop_assert_eq!(parse_market_filename(&name).unwrap(), (pid, cam));
        }
    }
}
