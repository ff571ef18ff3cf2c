import colorsys

import numpy as np
import pytest

from oodbridge import corruptions as C
from oodbridge import jpeg
from oodbridge.corruptions import CorruptionSpec, SeverityParams, apply_corruption
from oodbridge.data_io import LabeledDataset
from oodbridge.errors import FormatError, InvalidSpecError, ShapeError

SPECS = C.list_corruptions()
DETERMINISTIC = {"defocus_blur", "zoom_blur", "brightness", "contrast", "pixelate", "jpeg_compression"}
SPATIAL = {"defocus_blur", "glass_blur", "motion_blur", "zoom_blur", "elastic_transform", "pixelate"}


def _image(seed=0):
    return np.random.default_rng(seed).random((3, 32, 32)).astype(np.float32)


def _flat(value):
    return np.full((3, 32, 32), value, np.float32)


# --- specs -----------------------------------------------------------------


def test_spec_listing():
    assert len(SPECS) == 75
    assert [s.index for s in SPECS] == list(range(75))
    assert str(SPECS[0]) == "gaussian_noise.1" and str(SPECS[-1]) == "jpeg_compression.5"
    assert CorruptionSpec("contrast", 3).index == 57
    assert CorruptionSpec.from_index(57) == CorruptionSpec("contrast", 3)
    assert SPECS[20].display_name == "Frosted glass blur"


@pytest.mark.parametrize("sev", [0, 6, True, 2.0, "3"])
def test_spec_rejects_severity(sev):
    with pytest.raises(InvalidSpecError):
        CorruptionSpec("fog", sev)


def test_spec_rejects_family_and_index():
    with pytest.raises(InvalidSpecError):
        CorruptionSpec("rain", 1)
    with pytest.raises(InvalidSpecError):
        CorruptionSpec.from_index(75)


@pytest.mark.parametrize("name", ["glass_blur", "Frosted glass blur", "frosted-glass-blur", "4", " Glass Blur "])
def test_family_from_name(name):
    assert C.family_from_name(name) == "glass_blur"


@pytest.mark.parametrize("name", ["15", "blur", ""])
def test_family_from_name_rejects(name):
    with pytest.raises(InvalidSpecError):
        C.family_from_name(name)


# --- severity parameters ---------------------------------------------------


def test_params_text_roundtrip():
    p = SeverityParams({("fog", 2): [0.3, 2.5]})
    back = SeverityParams.from_text(p.to_text())
    assert back == p
    assert back.get(CorruptionSpec("fog", 2)) == (0.3, 2.5)
    assert back != SeverityParams()


def test_params_partial_file_keeps_defaults():
    p = SeverityParams.from_text("# tweak\nversion = 1\nGaussian noise.3 = [0.5]  # loud\n")
    assert p.get(CorruptionSpec("gaussian_noise", 3)) == (0.5,)
    assert p.get(CorruptionSpec("gaussian_noise", 4)) == (0.09,)


@pytest.mark.parametrize(
    "text, line",
    [
        ("fog.1 = [1, 2]\nfog.2 [1, 2]\n", 2),
        ("version = 2\n", 1),
        ("\n\nfog.9 = [1, 2]\n", 3),
        ("fog.1 = [1]\n", 1),
        ("fog.1 = 1, 2\n", 1),
        ("fog.1 = [1, x]\n", 1),
        ("fog = [1, 2]\n", 1),
        ("fog.1 = [nan, 1]\n", 1),
    ],
)
def test_params_errors_carry_line(text, line):
    with pytest.raises(FormatError) as info:
        SeverityParams.from_text(text, path="p.cfg")
    assert info.value.line == line and "p.cfg" in str(info.value)


def test_params_load(tmp_path):
    path = tmp_path / "sev.cfg"
    path.write_text("contrast.5 = [0.05]\n")
    assert SeverityParams.load(path).get(CorruptionSpec("contrast", 5)) == (0.05,)


# --- general contract ------------------------------------------------------


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_shape_range_and_determinism(spec):
    x = _image(spec.index)
    a = apply_corruption(x, spec, 11)
    assert a.shape == (3, 32, 32) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, apply_corruption(x, spec, 11))
    if spec.family in DETERMINISTIC:
        assert np.array_equal(a, apply_corruption(x, spec, 12))


@pytest.mark.parametrize("family", sorted(set(C.FAMILIES) - DETERMINISTIC))
def test_seed_changes_stochastic_output(family):
    spec = CorruptionSpec(family, 5)
    x = _image(1)
    assert not np.array_equal(apply_corruption(x, spec, 1), apply_corruption(x, spec, 2))


@pytest.mark.parametrize("family", C.FAMILIES)
def test_zero_parameters_are_identity(family):
    zero = SeverityParams({(family, s): [0.0] * C.PARAM_COUNTS[family] for s in range(1, 6)})
    x = _image(2)
    for sev in (1, 5):
        assert np.array_equal(apply_corruption(x, CorruptionSpec(family, sev), 3, zero), x)


@pytest.mark.parametrize("family", sorted(SPATIAL))
def test_spatial_filters_keep_flat_images(family):
    out = apply_corruption(_flat(0.4), CorruptionSpec(family, 4), 5)
    assert np.allclose(out, 0.4, atol=1e-6)


def test_input_validation():
    spec = SPECS[0]
    with pytest.raises(ShapeError):
        apply_corruption(np.zeros((32, 32, 3)), spec, 0)
    with pytest.raises(ShapeError):
        apply_corruption(_flat(1.5), spec, 0)
    with pytest.raises(ShapeError):
        apply_corruption(_flat(np.nan), spec, 0)
    with pytest.raises(InvalidSpecError):
        apply_corruption(_flat(0.5), "gaussian_noise.1", 0)


# --- per-family oracles ----------------------------------------------------


@pytest.mark.parametrize("sev", range(1, 6))
def test_gaussian_noise_std(sev):
    sigma = C.DEFAULT_SEVERITY.get(CorruptionSpec("gaussian_noise", sev))[0]
    diffs = np.concatenate(
        [(apply_corruption(_flat(0.5), CorruptionSpec("gaussian_noise", sev), s) - 0.5).ravel() for s in range(5)]
    )
    assert abs(diffs.mean()) < 0.005
    assert diffs.std() == pytest.approx(sigma, rel=0.03)


def test_gaussian_noise_on_fixed_image():
    x = _image(42)
    spec = CorruptionSpec("gaussian_noise", 3)
    sigma = C.DEFAULT_SEVERITY.get(spec)[0]
    d = apply_corruption(x, spec, 2024).astype(np.float64) - x
    # clipping biases pixels near 0 and 1, so measure on the interior
    inner = (x > 4 * sigma) & (x < 1 - 4 * sigma)
    assert np.abs([d[c][inner[c]].mean() for c in range(3)]).max() < 0.01
    assert d[inner].std() == pytest.approx(sigma, rel=0.15)


def test_shot_noise_moments():
    spec = CorruptionSpec("shot_noise", 5)
    scale = C.DEFAULT_SEVERITY.get(spec)[0]
    out = np.stack([apply_corruption(_flat(0.3), spec, s) for s in range(10)]).astype(np.float64)
    assert out.mean() == pytest.approx(0.3, abs=0.005)
    assert out.var() == pytest.approx(0.3 / scale, rel=0.05)
    # every value is a photon count over the scale
    assert np.allclose(out * scale, np.round(out * scale), atol=1e-4)


def test_impulse_noise_fraction_and_values():
    spec = CorruptionSpec("impulse_noise", 5)
    amount = C.DEFAULT_SEVERITY.get(spec)[0]
    out = np.stack([apply_corruption(_flat(0.5), spec, s) for s in range(20)])
    hit = out != 0.5
    assert set(np.unique(out)) <= {0.0, 0.5, 1.0}
    assert hit.mean() == pytest.approx(amount, abs=0.005)
    assert (out[hit] == 1).mean() == pytest.approx(0.5, abs=0.05)


def test_impulse_hits_nest_across_severities():
    x = _flat(0.5)
    masks = [apply_corruption(x, CorruptionSpec("impulse_noise", s), 9) != 0.5 for s in range(1, 6)]
    for lo, hi in zip(masks, masks[1:]):
        assert np.all(hi[lo])


def test_brightness_matches_colorsys():
    x = _image(3)
    for sev in (1, 5):
        amount = C.DEFAULT_SEVERITY.get(CorruptionSpec("brightness", sev))[0]
        out = apply_corruption(x, CorruptionSpec("brightness", sev), 0)
        for i, j in [(0, 0), (5, 17), (31, 31), (12, 3)]:
            h, s, v = colorsys.rgb_to_hsv(*x[:, i, j].astype(float))
            want = colorsys.hsv_to_rgb(h, s, min(1.0, v + amount))
            assert np.allclose(out[:, i, j], want, atol=1e-6)


def test_hsv_roundtrip_and_oracle():
    x = _image(4).astype(np.float64)
    x[:, 0, :4] = 0.25  # grey pixels
    hsv = C.rgb_to_hsv(x)
    assert np.allclose(C.hsv_to_rgb(hsv), x, atol=1e-12)
    for i, j in [(0, 0), (3, 9), (20, 30)]:
        assert np.allclose(hsv[:, i, j], colorsys.rgb_to_hsv(*x[:, i, j]), atol=1e-12)


def test_contrast_formula():
    x = _image(5)
    c = C.DEFAULT_SEVERITY.get(CorruptionSpec("contrast", 2))[0]
    m = x.astype(np.float64).mean()
    want = np.clip((x - m) * c + m, 0, 1)
    assert np.allclose(apply_corruption(x, CorruptionSpec("contrast", 2), 0), want, atol=1e-6)


def test_fog_stays_between_image_and_haze():
    strength = C.DEFAULT_SEVERITY.get(CorruptionSpec("fog", 3))[0]
    out = apply_corruption(_flat(0.2), CorruptionSpec("fog", 3), 4)
    assert out.min() >= 0.2 / (1 + strength) - 1e-6
    assert out.max() <= (0.2 + strength) / (1 + strength) + 1e-6
    assert out.std() > 0.01


def test_frost_adds_light():
    weight = C.DEFAULT_SEVERITY.get(CorruptionSpec("frost", 5))[0]
    x = _image(6)
    out = apply_corruption(x, CorruptionSpec("frost", 5), 2)
    assert np.all(out >= weight * x - 1e-6)


def test_pixelate_blocks():
    x = _image(7)
    for sev in range(1, 6):
        frac = C.DEFAULT_SEVERITY.get(CorruptionSpec("pixelate", sev))[0]
        out = apply_corruption(x, CorruptionSpec("pixelate", sev), 0)
        side = int(np.ceil(32 * frac - 1e-9))
        assert np.unique(out[0], axis=1).shape[1] <= side
        assert np.unique(out[0], axis=0).shape[0] <= side


def test_jpeg_matches_codec():
    x = _image(8)
    spec = CorruptionSpec("jpeg_compression", 4)
    q = int(C.DEFAULT_SEVERITY.get(spec)[0])
    rgb = np.round(x * 255).astype(np.uint8).transpose(1, 2, 0)
    want = jpeg.roundtrip(rgb, q).transpose(2, 0, 1) / 255.0
    assert np.allclose(apply_corruption(x, spec, 0), want, atol=1e-7)


def test_noise_severity_increases_damage():
    x = _image(9)
    for fam in ("gaussian_noise", "shot_noise", "impulse_noise"):
        dmg = [np.abs(apply_corruption(x, CorruptionSpec(fam, s), 1) - x).mean() for s in range(1, 6)]
        assert all(a < b for a, b in zip(dmg, dmg[1:])), fam


# --- helpers ---------------------------------------------------------------


def test_kernels_are_normalized():
    for r, a in [(0.3, 0.4), (1.5, 0.1), (3, 0.5)]:
        assert C.disk_kernel(r, a).sum() == pytest.approx(1.0)
    for n, s, ang in [(6, 1.0, 0), (9, 2.5, 33.3), (1, 0, -90)]:
        k = C.motion_kernel(n, s, ang)
        assert k.sum() == pytest.approx(1.0) and k.min() >= 0


def test_plasma_fractal():
    p = C.plasma_fractal(np.random.default_rng(0), 32, 3.0)
    assert p.shape == (32, 32) and p.min() == 0 and p.max() == 1
    with pytest.raises(ValueError):
        C.plasma_fractal(np.random.default_rng(0), 30)


def test_clipped_zoom_unit_factor():
    plane = np.random.default_rng(1).random((32, 32))
    assert np.allclose(C.clipped_zoom(plane, 1.0), plane)
    assert C.clipped_zoom(plane, 1.7).shape == (32, 32)


# --- datasets --------------------------------------------------------------


def test_corrupt_images_per_sample_streams():
    from oodbridge.rng import derive_seed

    imgs = np.stack([_image(i) for i in range(4)])
    spec = CorruptionSpec("glass_blur", 2)
    out = C.corrupt_images(imgs, spec, 21)
    for i in range(4):
        assert np.array_equal(out[i], apply_corruption(imgs[i], spec, derive_seed(21, i)))


def test_corrupt_images_independent_of_workers():
    imgs = np.random.default_rng(2).random((70, 3, 32, 32)).astype(np.float32)
    spec = CorruptionSpec("shot_noise", 3)
    assert np.array_equal(C.corrupt_images(imgs, spec, 4, workers=1), C.corrupt_images(imgs, spec, 4, workers=2))


def test_corrupt_dataset():
    ds = LabeledDataset(np.stack([_image(i) for i in range(3)]), np.array([2, 0, 1]), 3)
    out = C.corrupt_dataset(ds, CorruptionSpec("fog", 1), 0)
    assert np.array_equal(out.labels, ds.labels) and out.class_count == 3
    assert "fog.1" in out.identifier
    with pytest.raises(ShapeError):
        C.corrupt_dataset(LabeledDataset(np.zeros((0, 3, 32, 32)), np.zeros(0, int), 3), SPECS[0], 0)
