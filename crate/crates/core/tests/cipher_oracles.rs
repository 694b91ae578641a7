use std::path::Path;
use std::process::Command;

use cipher_vit::crypto::{
    decrypt_image, derive_permutation, encrypt_image, BlockPermutation, EncryptionKey,
};
use cipher_vit::image::{read_ppm, resize, write_ppm, ImageTensor, Interpolation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN_42_2: &str = include_str!("golden/perm_42_2.txt");

/// Reference shuffle written from the generator's published constants.
fn reference_permutation(key: u64, p: usize) -> Vec<usize> {
    let mut state = key;
    let mut next = || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let n = 3 * p * p;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (next() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    perm
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn golden_permutation_file() {
    let expected: Vec<usize> = GOLDEN_42_2
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect();
    let perm = derive_permutation(EncryptionKey(42), 2).unwrap();
    assert_eq!(perm.forward(), expected.as_slice());
    assert_eq!(reference_permutation(42, 2), expected);
    assert_eq!(
        derive_permutation(EncryptionKey(7), 1).unwrap().forward(),
        &[1, 2, 0]
    );
}

#[test]
fn encrypt_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (side, p) = (32, 16);
    let img = random_image(&mut rng, side, side);
    let perm = reference_permutation(7, p);
    let mut expected = ImageTensor::filled(side, side, 0);
    for by in (0..side).step_by(p) {
        for bx in (0..side).step_by(p) {
            for (k, &src) in perm.iter().enumerate() {
                let (c, y, x) = (k / (p * p), (k / p) % p, k % p);
                let (sc, sy, sx) = (src / (p * p), (src / p) % p, src % p);
                expected.set(c, by + y, bx + x, img.get(sc, by + sy, bx + sx));
            }
        }
    }
    let got = encrypt_image(&img, &derive_permutation(EncryptionKey(7), p).unwrap()).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn wrong_key_does_not_decrypt() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng, 32, 32);
    let enc = encrypt_image(&img, &derive_permutation(EncryptionKey(1), 8).unwrap()).unwrap();
    let wrong = decrypt_image(&enc, &derive_permutation(EncryptionKey(2), 8).unwrap()).unwrap();
    let same = wrong
        .pixels()
        .iter()
        .zip(img.pixels())
        .filter(|(a, b)| a == b)
        .count();
    assert!(
        same < img.pixels().len() / 10,
        "{same} pixels survived a wrong key"
    );
    let right = decrypt_image(&enc, &derive_permutation(EncryptionKey(1), 8).unwrap()).unwrap();
    assert_eq!(right, img);
}

#[test]
fn permutation_text_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("perm.txt");
    let perm = derive_permutation(EncryptionKey(99), 3).unwrap();
    perm.write_text(&path).unwrap();
    let back = BlockPermutation::read_text(&path, 3).unwrap();
    assert_eq!(back.forward(), perm.forward());
    assert!(BlockPermutation::read_text(&path, 2).is_err());
}

#[test]
fn bilinear_checkerboard_matches_oracle() {
    let mut img = ImageTensor::filled(2, 2, 0);
    for c in 0..3 {
        img.set(c, 0, 1, 255);
        img.set(c, 1, 0, 255);
    }
    let expected = [
        [0, 64, 191, 255],
        [64, 96, 159, 191],
        [191, 159, 96, 64],
        [255, 191, 64, 0],
    ];
    let out = resize(&img, 4, Interpolation::Bilinear).unwrap();
    for c in 0..3 {
        for (y, row) in expected.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                assert_eq!(out.get(c, y, x), v, "c{c} y{y} x{x}");
            }
        }
    }
}

#[test]
fn resize_identity_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = random_image(&mut rng, 8, 8);
    assert_eq!(resize(&img, 8, Interpolation::Bilinear).unwrap(), img);
    let flat = ImageTensor::filled(5, 5, 77);
    for mode in [Interpolation::Bilinear, Interpolation::Nearest] {
        let out = resize(&flat, 13, mode).unwrap();
        assert_eq!(out.height(), 13);
        assert!(out.pixels().iter().all(|&p| p == 77));
    }
    assert!(resize(&img, 0, Interpolation::Bilinear).is_err());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cipher-vit"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_encrypt_decrypt_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = random_image(&mut rng, 32, 48);
    let (plain, enc, dec) = (
        dir.path().join("a.ppm"),
        dir.path().join("b.ppm"),
        dir.path().join("c.ppm"),
    );
    write_ppm(&plain, &img).unwrap();

    let out = cli(&[
        "encrypt",
        "--in",
        s(&plain),
        "--out",
        s(&enc),
        "--key",
        "5",
        "--patch-size",
        "16",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_ne!(read_ppm(&enc).unwrap(), img);
    let out = cli(&[
        "decrypt",
        "--in",
        s(&enc),
        "--out",
        s(&dec),
        "--key",
        "5",
        "--patch-size",
        "16",
    ]);
    assert!(out.status.success());
    assert_eq!(read_ppm(&dec).unwrap(), img);

    let out = cli(&[
        "encrypt",
        "--in",
        s(&plain),
        "--out",
        s(&enc),
        "--key",
        "5",
        "--patch-size",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometry"));
    let out = cli(&[
        "encrypt",
        "--in",
        s(&dir.path().join("missing.ppm")),
        "--out",
        s(&enc),
        "--key",
        "5",
        "--patch-size",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn cli_derive_perm_writes_golden() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.txt");
    let out = cli(&[
        "derive-perm",
        "--key",
        "42",
        "--patch-size",
        "2",
        "--out",
        s(&path),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), GOLDEN_42_2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("key_space_log2: 28.84"));
}
