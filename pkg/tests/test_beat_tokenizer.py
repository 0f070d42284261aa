import numpy as np
import pytest

from beatformer import beat_tokenizer as bt
from beatformer.dsp import PeakList
from beatformer.ecg_io import EcgRecord
from beatformer.errors import FormatError, NoBeatsError


def record(leads):
    leads = np.asarray(leads, dtype=np.float64)
    names = [f"L{i}" for i in range(leads.shape[0])]
    return EcgRecord(leads, 500.0, names)


class TestFuseRms:
    def test_two_leads_closed_form(self):
        rec = record([[3.0, 0.0], [4.0, 0.0]])
        fused = bt.fuse_rms(rec)
        assert fused[0] == pytest.approx(np.sqrt((9 + 16) / 2), abs=1e-5)
        assert fused[0] == pytest.approx(3.53553, abs=1e-5)

    def test_single_lead_absolute_value(self):
        assert bt.fuse_rms(record([[-2.0, 5.0]])).tolist() == [2.0, 5.0]

    def test_all_zero_leads(self):
        fused = bt.fuse_rms(record(np.zeros((12, 7))))
        assert fused.tolist() == [0.0] * 7

    def test_inactive_lead_excluded(self):
        # the zero lead must not dilute the RMS of the active one
        rec = record([[3.0, 3.0], [0.0, 0.0]])
        assert bt.fuse_rms(rec).tolist() == [3.0, 3.0]

    def test_mixed_signs(self):
        rec = record([[1.0], [-1.0]])
        assert bt.fuse_rms(rec)[0] == pytest.approx(1.0)


def ramp(n=5000):
    # strictly positive, sample-identifiable values
    return np.arange(1.0, n + 1.0)


class TestSegmentBeat:
    def test_interior_beat_oracle(self):
        fused = ramp()
        tok = bt.segment_beat(fused, np.array([1000, 1600, 2200]), 1)
        nz = np.flatnonzero(tok.values)
        assert nz[0] == 133 and nz[-1] == 733
        assert nz.size == 733 - 133 + 1  # contiguous support
        assert tok.values[333] == np.float32(fused[1600])
        assert tok.r_index == 333

    def test_anchor_holds_fused_value(self):
        fused = ramp()
        for k, peak in enumerate([1000, 1600, 2200]):
            tok = bt.segment_beat(fused, np.array([1000, 1600, 2200]), k)
            assert tok.values[333] == np.float32(fused[peak])

    def test_slow_rhythm_caps(self):
        fused = ramp(10000)
        tok = bt.segment_beat(fused, np.array([3000, 6000, 9000]), 1)
        assert np.all(tok.values != 0.0)  # 333 before + 666 after fills the token

    def test_first_beat_mirrors_next_interval(self):
        fused = ramp(3000)
        tok = bt.segment_beat(fused, np.array([500, 1100]), 0)
        nz = np.flatnonzero(tok.values)
        assert nz[0] == 333 - 200  # before = floor(600/3)

    def test_last_beat_mirrors_previous_interval(self):
        fused = ramp(3000)
        tok = bt.segment_beat(fused, np.array([500, 1100]), 1)
        nz = np.flatnonzero(tok.values)
        assert nz[-1] == 333 + 400  # after = floor(2*600/3)

    def test_single_peak_full_window(self):
        fused = ramp(3000)
        tok = bt.segment_beat(fused, np.array([1500]), 0)
        nz = np.flatnonzero(tok.values)
        assert nz[0] == 0 and nz[-1] == 999

    def test_record_start_clipped_to_zero(self):
        fused = ramp(3000)
        tok = bt.segment_beat(fused, np.array([100, 1300]), 0)
        # before wants min(400, 333) = 333 but only 100 samples exist
        nz = np.flatnonzero(tok.values)
        assert nz[0] == 333 - 100
        assert np.all(tok.values[: 333 - 100] == 0.0)

    def test_record_end_clipped_to_zero(self):
        fused = ramp(1600)
        tok = bt.segment_beat(fused, np.array([300, 1500]), 1)
        nz = np.flatnonzero(tok.values)
        assert nz[-1] == 333 + (1599 - 1500)

    def test_shorter_rr_means_more_zeros(self):
        fused = ramp(6000)
        fast = bt.segment_beat(fused, np.array([2000, 2400, 2800]), 1)  # RR 400
        slow = bt.segment_beat(fused, np.array([2000, 2800, 3600]), 1)  # RR 800
        assert (fast.values == 0).sum() > (slow.values == 0).sum()

    def test_translation_equivariance(self):
        rng = np.random.default_rng(0)
        base = rng.normal(size=4000)
        peaks = np.array([1200, 1800, 2400])
        shift = 250
        shifted = np.concatenate([np.zeros(shift), base])[:4000 + shift]
        for k in range(3):
            a = bt.segment_beat(base, peaks, k)
            b = bt.segment_beat(shifted, peaks + shift, k)
            assert np.array_equal(a.values, b.values)

    def test_peaklist_accepted(self):
        fused = ramp()
        peaks = PeakList(np.array([1000, 1600, 2200]), 500.0)
        tok = bt.segment_beat(fused, peaks, 1)
        assert tok.values[333] == np.float32(fused[1600])

    def test_bad_beat_index(self):
        with pytest.raises(ValueError):
            bt.segment_beat(ramp(), np.array([100]), 1)

    def test_peak_outside_signal(self):
        with pytest.raises(ValueError):
            bt.segment_beat(ramp(100), np.array([100]), 0)

    def test_custom_width(self):
        fused = ramp()
        tok = bt.segment_beat(fused, np.array([1000, 1600, 2200]), 1, d_model=9)
        assert tok.values.shape == (9,)
        assert tok.r_index == 3
        assert tok.values[3] == np.float32(fused[1600])


class TestBuildSequence:
    def test_padding_rule(self):
        fused = ramp(20000)
        peaks = np.arange(10) * 500 + 1000
        seq = bt.build_sequence(fused, peaks)
        assert seq.n_real == 10
        assert seq.mask.tolist() == [True] * 10 + [False] * 40
        assert np.all(seq.tokens[10:] == 0.0)

    def test_truncation_rule(self):
        fused = ramp(50000)
        peaks = np.arange(80) * 500 + 1000
        seq = bt.build_sequence(fused, peaks)
        assert seq.n_real == 50
        assert seq.mask.all()
        first = bt.segment_beat(fused, peaks, 0)
        assert np.array_equal(seq.tokens[0], first.values)

    def test_zero_peaks_error(self):
        with pytest.raises(NoBeatsError, match="no beats detected"):
            bt.build_sequence(ramp(), np.array([], dtype=np.int64))

    def test_matches_segment_beat(self):
        fused = np.random.default_rng(1).normal(size=30000)
        peaks = np.sort(np.random.default_rng(2).choice(
            np.arange(500, 29000), size=12, replace=False))
        seq = bt.build_sequence(fused, peaks)
        for k in range(seq.n_real):
            assert np.array_equal(seq.tokens[k],
                                  bt.segment_beat(fused, peaks, k).values), k

    def test_float32_output(self):
        seq = bt.build_sequence(ramp(), np.array([1000, 1600]))
        assert seq.tokens.dtype == np.float32

    def test_anchor_invariant_across_real_tokens(self):
        fused = ramp(20000)
        peaks = np.arange(12) * 700 + 2000
        seq = bt.build_sequence(fused, peaks)
        for k in range(seq.n_real):
            assert seq.tokens[k, 333] == np.float32(fused[peaks[k]])


class TestSequenceValidation:
    def test_mask_must_be_prefix(self):
        tokens = np.zeros((4, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            bt.BeatSequence(tokens, np.array([True, False, True, False]), 2)

    def test_n_real_must_match(self):
        tokens = np.zeros((4, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            bt.BeatSequence(tokens, np.array([True, True, False, False]), 3)

    def test_d_model_property(self):
        seq = bt.BeatSequence(np.zeros((4, 7), np.float32),
                              np.array([True, False, False, False]), 1)
        assert seq.d_model == 7


class TestCacheFormat:
    def make_seq(self, seed=0, d_model=1000):
        rng = np.random.default_rng(seed)
        n_real = 9
        tokens = np.zeros((bt.MAX_POS, d_model), dtype=np.float32)
        tokens[:n_real] = rng.normal(size=(n_real, d_model)).astype(np.float32)
        mask = np.arange(bt.MAX_POS) < n_real
        return bt.BeatSequence(tokens, mask, n_real)

    def test_round_trip(self, tmp_path):
        seq = self.make_seq()
        p = str(tmp_path / "a.tokens")
        bt.save_tokens(p, seq)
        back = bt.load_tokens(p)
        assert np.array_equal(back.tokens, seq.tokens)
        assert np.array_equal(back.mask, seq.mask)
        assert back.n_real == seq.n_real

    def test_file_size_fixed(self, tmp_path):
        p = str(tmp_path / "a.tokens")
        bt.save_tokens(p, self.make_seq())
        import os
        assert os.path.getsize(p) == 4 + 12 + 50 * 1000 * 4 + 50

    def test_byte_determinism(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        bt.save_tokens(a, self.make_seq(3))
        bt.save_tokens(b, self.make_seq(3))
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_narrow_width_round_trip(self, tmp_path):
        seq = self.make_seq(d_model=8)
        p = str(tmp_path / "n.tokens")
        bt.save_tokens(p, seq)
        back = bt.load_tokens(p)
        assert back.d_model == 8
        assert np.array_equal(back.tokens, seq.tokens)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.tokens"
        p.write_bytes(b"NOPE" + bytes(200062))
        with pytest.raises(FormatError):
            bt.load_tokens(str(p))

    def test_bad_version(self, tmp_path):
        p = str(tmp_path / "v.tokens")
        bt.save_tokens(p, self.make_seq())
        blob = bytearray(open(p, "rb").read())
        blob[4] = 99
        open(p, "wb").write(bytes(blob))
        with pytest.raises(FormatError):
            bt.load_tokens(p)

    def test_truncated_file(self, tmp_path):
        p = str(tmp_path / "t.tokens")
        bt.save_tokens(p, self.make_seq())
        blob = open(p, "rb").read()
        open(p, "wb").write(blob[:-10])
        with pytest.raises(FormatError):
            bt.load_tokens(p)

    def test_mask_consistency_checked(self, tmp_path):
        p = str(tmp_path / "m.tokens")
        bt.save_tokens(p, self.make_seq())
        blob = bytearray(open(p, "rb").read())
        blob[-1] = 1  # claim the last slot is real; n_real says otherwise
        open(p, "wb").write(bytes(blob))
        with pytest.raises(FormatError):
            bt.load_tokens(p)

    def test_wrong_row_count_rejected_on_save(self, tmp_path):
        seq = bt.BeatSequence(np.zeros((4, 3), np.float32),
                              np.array([True, False, False, False]), 1)
        with pytest.raises(ValueError):
            bt.save_tokens(str(tmp_path / "w"), seq)
