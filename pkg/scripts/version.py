"""
Version management module for the ZeroSlide benchmark harness.

Versions follow Semantic Versioning 2.0.0 (https://semver.org/). The harness
version is recorded in every run manifest; a manifest written by another
major version is never resumed.
"""
from packaging.version import InvalidVersion, Version

# MAJOR version when result files or manifests change incompatibly
# MINOR version when functionality is added in a backwards compatible manner
# PATCH version when you make backwards compatible bug fixes
VERSION_MAJOR = 1
VERSION_MINOR = 0
VERSION_PATCH = 0

# Can be 'alpha', 'beta', 'rc' (release candidate), or empty string for final release
VERSION_QUALIFIER = ''

# Binary format versions (the u32 after each magic)
FORMAT_VERSIONS = {
    'ZSLB': 1,
    'ZSLP': 1,
    'ZSLM': 1,
    'ZSLR': 1,
}


def get_version():
    """
    Generate the full version string in semantic versioning format.

    Returns:
        str: Formatted version string (e.g., "1.0.0" or "1.1.0-beta")
    """
    version = f"{VERSION_MAJOR}.{VERSION_MINOR}.{VERSION_PATCH}"
    if VERSION_QUALIFIER:
        version += f"-{VERSION_QUALIFIER}"
    return version


def get_version_info():
    """
    Get detailed version information as a dictionary.

    Returns:
        dict: major, minor, patch, qualifier, full_version and format versions
    """
    return {
        'major': VERSION_MAJOR,
        'minor': VERSION_MINOR,
        'patch': VERSION_PATCH,
        'qualifier': VERSION_QUALIFIER,
        'full_version': get_version(),
        'formats': dict(FORMAT_VERSIONS),
    }


def check_version_compatibility(min_version):
    """
    Check if the current version is compatible with a minimum required version.

    Args:
        min_version (str): Minimum version requirement (e.g., "1.0.0")

    Returns:
        bool: True if the current version meets or exceeds the minimum version
    """
    try:
        current = Version(f"{VERSION_MAJOR}.{VERSION_MINOR}.{VERSION_PATCH}")
        # Pre-release identifiers are ignored for the comparison
        return current >= Version(Version(min_version).base_version)
    except (InvalidVersion, TypeError):
        return False


def same_major_version(other_version):
    """Whether ``other_version`` shares the current major version."""
    try:
        return Version(other_version).major == VERSION_MAJOR
    except (InvalidVersion, TypeError):
        return False


__version__ = get_version()
