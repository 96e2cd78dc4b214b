"""Small hand-built scenes shared by the segmentation tests."""
import numpy as np

from ilc_density.segscore import PeakEvidence, Proposal


def two_adjacent_instances(scale=0.02):
    """Two touching 6x5 blobs on a 16x16 grid with unit density mass each.

    Returns ``(peaks, proposals, density, background)``; proposals are
    [instance 1, instance 2, merged]. The response map of each peak decays
    with distance but still covers the neighbour, so without the density
    term the merged proposal collects more response than either instance.
    """
    h = w = 16
    inst1 = np.zeros((h, w), bool)
    inst1[5:11, 2:7] = True
    inst2 = np.zeros((h, w), bool)
    inst2[5:11, 7:12] = True
    merged = inst1 | inst2
    density = inst1 / inst1.sum() + inst2 / inst2.sum()
    background = (~merged).astype(float)
    yy, xx = np.mgrid[:h, :w]
    peaks = []
    for loc in [(7, 4), (7, 9)]:
        d2 = (yy - loc[0]) ** 2 + (xx - loc[1]) ** 2
        resp = scale * np.exp(-d2 / (2 * 4.0 ** 2)) * merged
        peaks.append(PeakEvidence(loc, resp, 0))
    proposals = [Proposal(inst1, id="inst1"), Proposal(inst2, id="inst2"), Proposal(merged, id="merged")]
    return peaks, proposals, density[None], background[None]
