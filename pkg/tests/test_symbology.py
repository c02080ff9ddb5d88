import numpy as np
import pytest

from uhrbarcode.symbology import (
    ONE_D,
    EncodeError,
    Kind,
    ModulePattern,
    Symbology,
    check_digit,
    code128_checksum,
    encode,
    random_payload,
    render,
)

from scanline import scan_decode


def summation_check_digit(digits):
    """Independent oracle: pad to 13 positions, weights 1,3,1,3... from the left."""
    padded = digits.rjust(12 if len(digits) <= 12 else len(digits), "0")
    odd = sum(int(d) for d in padded[0::2])
    even = sum(int(d) for d in padded[1::2])
    return (10 - (odd + 3 * even) % 10) % 10


class TestCheckDigit:
    def test_ean13_worked_value(self):
        # odd-position sum 20, even-position sum 23: 20 + 3*23 = 89 -> 1
        assert check_digit(Kind.EAN13, "400638133393") == 1

    def test_upca_worked_value(self):
        # 3*14 + 16 = 58 -> 2
        assert check_digit(Kind.UPCA, "03600029145") == 2

    def test_zeros(self):
        assert check_digit(Kind.EAN13, "000000000000") == 0

    @pytest.mark.parametrize("bad", ["40063813339X", "4006381333 3"])
    def test_non_digit_rejected(self, bad):
        with pytest.raises(EncodeError, match="non-digit"):
            check_digit(Kind.EAN13, bad)

    def test_oracle_agrees_on_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = "".join(rng.choice(list("0123456789"), 12))
            assert check_digit(Kind.EAN13, d) == summation_check_digit(d)
            u = d[:11]
            assert check_digit(Kind.UPCA, u) == summation_check_digit(u)


class TestEncode:
    def test_code128_checksum_value(self):
        # start B (104) + 1 * value('A' = 33)
        assert code128_checksum([104, 33]) == 34
        pat = encode(Symbology(Kind.CODE128, "A"))
        # start + A + checksum + 13-module stop
        assert pat.total_modules == 3 * 11 + 13

    def test_code39_structure(self):
        pat = encode(Symbology(Kind.CODE39, "AB"))
        widths = list(pat.widths)
        # 4 symbols of 9 elements separated by 3 single-module gaps
        assert len(widths) == 4 * 9 + 3
        for s in range(4):
            sym = widths[s * 10:s * 10 + 9]
            assert sum(w == 3 for w in sym) == 3
            assert sum(w == 1 for w in sym) == 6

    def test_ean13_95_modules(self):
        assert encode(Symbology(Kind.EAN13, "4006381333931")).total_modules == 95
        assert encode(Symbology(Kind.UPCA, "03600029145")).total_modules == 95

    def test_wrong_check_digit_rejected(self):
        with pytest.raises(EncodeError, match="check digit"):
            encode(Symbology(Kind.EAN13, "4006381333932"))

    @pytest.mark.parametrize("kind,payload,char", [
        (Kind.CODE39, "ab", "a"), (Kind.CODE93, "A*", "*"), (Kind.CODE128, "é", "é"), (Kind.ITF, "12a4", "a"),
    ])
    def test_bad_character_named(self, kind, payload, char):
        with pytest.raises(EncodeError, match=repr(char)):
            encode(Symbology(kind, payload))

    def test_itf_odd_length_rejected(self):
        with pytest.raises(EncodeError):
            encode(Symbology(Kind.ITF, "123"))

    def test_patterns_start_and_end_with_bar(self):
        rng = np.random.default_rng(3)
        for kind in ONE_D:
            pat = encode(Symbology(kind, random_payload(kind, rng)))
            assert pat.to_modules()[0] == "1" and pat.to_modules()[-1] == "1"

    def test_all_space_pattern_invalid(self):
        with pytest.raises(ValueError):
            ModulePattern.from_modules("0000")
        with pytest.raises(ValueError):
            ModulePattern((1, 2))

    def test_matrix_deterministic(self):
        a = encode(Symbology(Kind.MATRIX2D, "HELLO"))
        b = encode(Symbology(Kind.MATRIX2D, "HELLO"))
        c = encode(Symbology(Kind.MATRIX2D, "WORLD"))
        assert np.array_equal(a.grid, b.grid)
        assert not np.array_equal(a.grid, c.grid)
        assert a.grid[:, 0].all() and a.grid[-1, :].all()


class TestRender:
    def test_scaling(self):
        pat = encode(Symbology(Kind.CODE128, "Hi!"))
        img1, box1 = render(pat, 1, quiet_zone_modules=0)
        img3, box3 = render(pat, 3, quiet_zone_modules=0)
        assert box3.w == 3 * box1.w
        np.testing.assert_array_equal(img3[img3.shape[0] // 2], np.repeat(img1[img1.shape[0] // 2], 3))

    def test_ean13_box_width(self):
        _, box = render(encode(Symbology(Kind.EAN13, "4006381333931")), 2)
        assert box.w == 190
        assert (box.x, box.y) == (20, 20)

    def test_height_rule(self):
        _, box = render(encode(Symbology(Kind.EAN13, "4006381333931")), 1)
        assert box.h == 28
        _, box = render(encode(Symbology(Kind.CODE39, "A")), 1)
        assert box.h == 24

    def test_tight_box_excludes_quiet_zone(self):
        img, box = render(encode(Symbology(Kind.ITF, "1234")), 2, quiet_zone_modules=5)
        inside = img[box.y:box.y + box.h, box.x:box.x + box.w]
        assert (inside[:, 0] == 0).all() and (inside[:, -1] == 0).all()
        assert (img[:, :box.x] == 255).all()


@pytest.mark.parametrize("kind", ONE_D)
def test_scanline_round_trip(kind):
    rng = np.random.default_rng(hash(kind.value) % 2**32)
    for _ in range(20):
        payload = random_payload(kind, rng)
        img, _ = render(encode(Symbology(kind, payload)), int(rng.integers(1, 4)))
        decoded = scan_decode(img, kind)
        if kind in (Kind.EAN13, Kind.UPCA):
            assert decoded[:-1] == payload
        else:
            assert decoded == payload
