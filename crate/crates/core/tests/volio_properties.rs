use proptest::prelude::*;
use sahnet::volio::{
    diagonal_affine, read_nifti, resample, sample_trilinear, write_nifti, Affine, IntensityUnit, Interpolation, VolioError, Volume,
};

fn any_volume() -> impl Strategy<Value = Volume> {
    (1usize..7, 1usize..7, 1usize..5, prop::array::uniform3(0.3f64..4.0), prop::array::uniform3(-200.0f64..200.0), -0.3f64..0.3, 0usize..3)
        .prop_flat_map(|(nx, ny, nz, spacing, origin, shear, unit)| {
            prop::collection::vec(-3000.0f32..3000.0, nx * ny * nz).prop_map(move |data| {
                let mut a = diagonal_affine(spacing, origin);
                a[(0, 1)] = shear;
                let unit = [IntensityUnit::Hu, IntensityUnit::NonNegative, IntensityUnit::Normalized][unit];
                Volume::new(data, [nx, ny, nz], a, unit).unwrap()
            })
        })
}

fn sample_file() -> Vec<u8> {
    let v = Volume::from_fn([4, 3, 2], diagonal_affine([1.0, 2.0, 3.0], [5.0, 6.0, 7.0]), IntensityUnit::Hu, |x, y, z| {
        (x + 10 * y + 100 * z) as f32
    })
    .unwrap();
    write_nifti(&v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn write_read_is_identity(v in any_volume()) {
        let bytes = write_nifti(&v).unwrap();
        let back = read_nifti(&bytes).unwrap();
        prop_assert_eq!(back, v);
    }
}

proptest! {
    #[test]
    fn corrupted_magic_is_rejected(pos in 344usize..348, byte in any::<u8>()) {
        let mut bytes = sample_file();
        prop_assume!(bytes[pos] != byte);
        bytes[pos] = byte;
        let err = read_nifti(&bytes).unwrap_err();
        prop_assert!(matches!(err, VolioError::BadMagic | VolioError::PairUnsupported | VolioError::Nifti2Unsupported), "{err:?}");
    }

    #[test]
    fn corrupted_header_size_is_rejected(value in any::<i32>()) {
        prop_assume!(value != 348 && value.swap_bytes() != 348 && value != 540 && value.swap_bytes() != 540);
        let mut bytes = sample_file();
        bytes[..4].copy_from_slice(&value.to_le_bytes());
        prop_assert!(matches!(read_nifti(&bytes), Err(VolioError::BadMagic)));
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..800)) {
        let _ = read_nifti(&bytes);
    }
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = sample_file();
    for len in 0..bytes.len() {
        match read_nifti(&bytes[..len]) {
            Err(VolioError::Truncated { .. }) => {}
            other => panic!("prefix of {len} bytes: {other:?}"),
        }
    }
    assert!(read_nifti(&bytes).is_ok());
}

#[test]
fn nearest_neighbour_picks_closest_voxel() {
    let v = Volume::from_fn([4, 4, 4], Affine::identity(), IntensityUnit::Hu, |x, y, z| (x + 4 * y + 16 * z) as f32).unwrap();
    let target = diagonal_affine([1.0; 3], [0.4, 0.6, 1.49]);
    let out = resample(&v, &target, [3, 3, 2], Interpolation::Nearest).unwrap();
    for z in 0..2 {
        for y in 0..3 {
            for x in 0..3 {
                let want = v.get(x, y + 1, z + 1);
                assert_eq!(out.get(x, y, z), want, "({x},{y},{z})");
            }
        }
    }
}

fn linear_field(coef: [f64; 4]) -> impl Fn(usize, usize, usize) -> f32 {
    move |x, y, z| (coef[0] + coef[1] * x as f64 + coef[2] * y as f64 + coef[3] * z as f64) as f32
}

proptest! {
    #[test]
    fn trilinear_reproduces_linear_fields(
        coef in prop::array::uniform4(-10.0f64..10.0),
        p in prop::array::uniform3(0.0f64..4.0),
    ) {
        let field = linear_field(coef);
        let v = Volume::from_fn([5, 5, 5], Affine::identity(), IntensityUnit::Hu, &field).unwrap();
        let got = sample_trilinear(&v, p);
        // Interpolating the f32-rounded grid values; allow for that rounding.
        let want = coef[0] + coef[1] * p[0] + coef[2] * p[1] + coef[3] * p[2];
        prop_assert!((got - want).abs() <= 1e-4, "{got} vs {want}");
    }

    #[test]
    fn resampling_with_a_shift_stays_linear(
        coef in prop::array::uniform4(-10.0f64..10.0),
        shift in prop::array::uniform3(-0.9f64..0.9),
        spacing in prop::array::uniform3(0.5f64..1.0),
    ) {
        let v = Volume::from_fn([6, 6, 6], Affine::identity(), IntensityUnit::Hu, linear_field(coef)).unwrap();
        // Target voxels stay inside the source grid.
        let origin = [1.0 + shift[0], 1.0 + shift[1], 1.0 + shift[2]];
        let target = diagonal_affine(spacing, origin);
        let out = resample(&v, &target, [3, 3, 3], Interpolation::Trilinear).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let w = [x, y, z].map(|i| i as f64);
                    let q = [0, 1, 2].map(|a| origin[a] + spacing[a] * w[a]);
                    let want = coef[0] + coef[1] * q[0] + coef[2] * q[1] + coef[3] * q[2];
                    prop_assert!((out.get(x, y, z) as f64 - want).abs() <= 1e-3);
                }
            }
        }
    }

    #[test]
    fn nearest_neighbour_emits_only_source_values(
        v in any_volume(),
        scale in prop::array::uniform3(0.3f64..3.0),
        offset in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let target = diagonal_affine(scale, offset);
        let out = resample(&v, &target, [5, 4, 3], Interpolation::Nearest).unwrap();
        for &x in out.data() {
            prop_assert!(x == 0.0 || v.data().contains(&x), "{x} is not a source value");
        }
    }
}
