"""Regenerate butterworth_reference.json with scipy's filter design.

Run once; the JSON is committed so the test suite never imports scipy.signal.
"""

import json
from pathlib import Path

import numpy as np
import scipy.signal

ORDERS = (1, 2)
CRITICAL_TIMES = (2, 5, 10, 15, 20)


def reference_curve(order, critical_time):
    b, a = scipy.signal.butter(order, 0.8, "lowpass", analog=False)
    w, h = scipy.signal.freqz(b, a)
    return (critical_time * w / 2).tolist(), (5 * np.log(np.abs(h))).tolist()


def main():
    curves = []
    for n in ORDERS:
        for tc in CRITICAL_TIMES:
            t, gain = reference_curve(n, tc)
            curves.append({"order": n, "critical_time": tc, "t": t, "gain": gain})
    out = Path(__file__).with_name("butterworth_reference.json")
    out.write_text(json.dumps({"scipy": scipy.__version__, "curves": curves}))


if __name__ == "__main__":
    main()
