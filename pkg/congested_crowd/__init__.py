# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

"""Crowd motion under a hard density cap, with Wasserstein projections."""

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

from congested_crowd.common import PACKAGE_VERSION

__version__ = ".".join(str(n) for n in PACKAGE_VERSION)
