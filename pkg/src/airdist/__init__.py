"""Spatial estimation of pollutant concentration distributions.

Three complementary estimators of the station-level distribution of daily
concentrations are provided:

* ``frk``   -- compositional fixed rank kriging of the (below, above)
  threshold composition;
* ``mqsr``  -- simultaneous non-crossing quantile fields penalized by a
  finite-element Laplacian;
* ``sde``   -- Bayes-space density estimation with simplicial FPCA and
  score kriging.

``indicators`` turns any of them into exceedance probabilities, expected
exceedance days, high quantiles and a cross-method consensus class.
"""

__version__ = "0.1.0"
