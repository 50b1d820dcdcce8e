import numpy as np
import pytest

from slicevol.errors import ValidationError
from slicevol.phantom import PhantomParams, generate_cohort, generate_phantom, philox
from slicevol.volume import slice_ncc


def _noise_free(**kw):
    return PhantomParams(noise_sigma=0.0, bias_amplitude=0.0, deform_amplitude=0.0, **kw)


def test_noise_free_intensity_equals_class_mean():
    p = _noise_free(dims=(24, 24, 24))
    v, m = generate_phantom(p)
    means = np.concatenate([[0.0], p.class_mean_intensities]).astype(np.float32)
    assert np.array_equal(v.data, means[m.labels])
    assert np.all(m.counts() > 0)


def test_nesting_without_deformation():
    v, m = generate_phantom(_noise_free(dims=(32, 32, 32)))
    from scipy.ndimage import binary_erosion

    for k in range(1, 4):
        inner = m.labels > k
        outer = m.labels >= k
        assert np.all(outer[inner])
        # the inner region stays inside the interior of the outer one
        assert np.all(binary_erosion(outer)[inner])


def test_same_seed_bit_identical():
    p = PhantomParams(dims=(16, 16, 16), seed=42)
    (v1, m1), (v2, m2) = generate_phantom(p), generate_phantom(p)
    assert v1.equals(v2) and m1.equals(m2)


def test_background_is_exactly_zero():
    v, m = generate_phantom(PhantomParams(dims=(16, 16, 16), seed=3))
    assert np.all(v.data[m.labels == 0] == 0)


def test_class_counts_vary_across_seeds():
    counts = np.array([generate_phantom(PhantomParams(seed=s))[1].counts() for s in range(1, 101)])
    cv = counts.std(axis=0) / counts.mean(axis=0)
    assert np.all(cv[1:] > 0.01), cv


def test_cohort_seeds_and_distinctness():
    base = PhantomParams(dims=(16, 16, 16), seed=9)
    cohort = generate_cohort(base, 3)
    first, _ = generate_phantom(base)
    assert cohort[0][0].equals(first)
    assert not cohort[0][0].equals(cohort[1][0])
    assert not cohort[1][0].equals(cohort[2][0])
    assert not cohort[0][0].equals(cohort[2][0])


def test_cohort_threads_do_not_change_bits():
    base = PhantomParams(dims=(16, 16, 16), seed=2)
    a = generate_cohort(base, 4, threads=1)
    b = generate_cohort(base, 4, threads=3)
    assert all(x[0].equals(y[0]) and x[1].equals(y[1]) for x, y in zip(a, b))


def test_cohort_of_40_has_all_classes():
    cohort = generate_cohort(PhantomParams(seed=0), 40)
    assert len(cohort) == 40
    assert all(np.all(m.counts() > 0) for _, m in cohort)


def test_adjacent_slice_coherence():
    scores = [slice_ncc(generate_phantom(PhantomParams(seed=s))[0], 0) for s in range(10)]
    assert min(scores) > 0.9, scores


@pytest.mark.parametrize(
    "kw",
    [
        {"dims": (4, 4, 4)},
        {"deform_amplitude": 0.5},
        {"class_mean_intensities": (0.5, 0.25, 0.75, 1.0)},
        {"class_mean_intensities": (0.25, 0.5, 0.75)},
        {"noise_sigma": 0.1},
        {"noise_sigma": -0.1},
    ],
)
def test_invalid_params(kw):
    with pytest.raises(ValidationError):
        generate_phantom(PhantomParams(**kw))


def test_philox_is_the_counter_generator():
    g = philox(5)
    assert isinstance(g.bit_generator, np.random.Philox)
    assert np.array_equal(g.random(4), philox(5).random(4))
