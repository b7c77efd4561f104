#!/usr/bin/env python3
# Derives the eV -> nm conversion constant used by wavelength_from_ev and the
# 17.5 keV reference wavelength frozen in the metrics tests, from the exact
# SI defining constants.
h = 6.62607015e-34   # J s
c = 299792458.0      # m / s
e = 1.602176634e-19  # C

hc_ev_nm = h * c / e * 1e9
print(f"hc = {hc_ev_nm!r} eV nm  (engine rounds to 1239.842)")
for energy_ev in (17500.0, 8800.0):
    exact = hc_ev_nm / energy_ev
    rounded = 1239.842 / energy_ev
    print(f"lambda({energy_ev:g} eV) = {exact!r} nm exact, {rounded!r} nm with the rounded constant")
