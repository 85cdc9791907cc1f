//! Great-circle distances, Web-Mercator resolution and the local tangent-plane
//! mapping between GPS coordinates and satellite-patch pixels.
//!
//! Pixels: `u` is the column (east positive), `v` the row (south positive),
//! origin at the top-left corner of a north-up patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Web-Mercator ground resolution at the equator for zoom 0, in m/px.
pub const MERCATOR_EQUATOR_MPP: f64 = 156_543.033_92;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(Error::config(format!("invalid coordinate ({lat}, {lon})")));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Geographic footprint of a square, north-up satellite patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatPatchGeo {
    pub center: GeoPoint,
    /// Ground resolution, meters per native pixel.
    pub res_mpp: f64,
    /// Native side length in pixels.
    pub size_px: f64,
}

impl SatPatchGeo {
    pub fn new(center: GeoPoint, res_mpp: f64, size_px: f64) -> Result<Self> {
        if !(res_mpp > 0.0 && res_mpp.is_finite()) || !(size_px > 0.0 && size_px.is_finite()) {
            return Err(Error::config(format!(
                "patch resolution {res_mpp} and size {size_px} must be positive"
            )));
        }
        Ok(SatPatchGeo {
            center,
            res_mpp,
            size_px,
        })
    }

    pub fn extent_m(&self) -> f64 {
        self.res_mpp * self.size_px
    }
}

pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (la, lb) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lb - la;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Meters per pixel of a Web-Mercator tile at `lat` and `zoom`.
pub fn mercator_resolution(lat: f64, zoom: u32) -> Result<f64> {
    if !(lat.abs() < 85.0) {
        return Err(Error::config(format!("latitude {lat} is outside the Mercator range")));
    }
    Ok(MERCATOR_EQUATOR_MPP * lat.to_radians().cos() / 2f64.powi(zoom as i32))
}

/// `(east, north)` meters from the patch center.
fn tangent_offset(p: GeoPoint, center: GeoPoint) -> (f64, f64) {
    let east = EARTH_RADIUS_M * center.lat.to_radians().cos() * (p.lon - center.lon).to_radians();
    let north = EARTH_RADIUS_M * (p.lat - center.lat).to_radians();
    (east, north)
}

/// Native-resolution pixel of `p`. Fails when the point falls outside the patch.
pub fn gps_to_pixel(p: GeoPoint, patch: &SatPatchGeo) -> Result<(f64, f64)> {
    let (east, north) = tangent_offset(p, patch.center);
    let half = patch.size_px / 2.0;
    let u = half + east / patch.res_mpp;
    let v = half - north / patch.res_mpp;
    let inside = |x: f64| (0.0..patch.size_px).contains(&x);
    if !inside(u) || !inside(v) {
        return Err(Error::OutOfPatch {
            u,
            v,
            size: patch.size_px,
        });
    }
    Ok((u, v))
}

pub fn pixel_to_gps(u: f64, v: f64, patch: &SatPatchGeo) -> GeoPoint {
    let half = patch.size_px / 2.0;
    let east = (u - half) * patch.res_mpp;
    let north = (half - v) * patch.res_mpp;
    let c = patch.center;
    GeoPoint {
        lat: c.lat + (north / EARTH_RADIUS_M).to_degrees(),
        lon: c.lon + (east / (EARTH_RADIUS_M * c.lat.to_radians().cos())).to_degrees(),
    }
}

/// Ground distance in meters between two model-scale pixels.
/// `model_scale` is native patch pixels per model pixel.
pub fn pixel_error_to_meters(pred: (f64, f64), gt: (f64, f64), patch: &SatPatchGeo, model_scale: f64) -> f64 {
    (pred.0 - gt.0).hypot(pred.1 - gt.1) * model_scale * patch.res_mpp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch() -> SatPatchGeo {
        SatPatchGeo::new(GeoPoint::new(40.1, 116.3).unwrap(), 0.114, 640.0).unwrap()
    }

    #[test]
    fn center_maps_to_middle() {
        let p = patch();
        assert_eq!(gps_to_pixel(p.center, &p).unwrap(), (320.0, 320.0));
        assert_eq!(pixel_to_gps(320.0, 320.0, &p), p.center);
    }

    #[test]
    fn out_of_patch_is_error() {
        let p = patch();
        let far = pixel_to_gps(700.0, 10.0, &p);
        assert!(matches!(gps_to_pixel(far, &p), Err(Error::OutOfPatch { .. })));
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::NAN).is_err());
        assert!(mercator_resolution(89.0, 20).is_err());
    }
}
