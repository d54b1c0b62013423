import os
from setuptools import setup, find_packages

with open('README.md') as f:
    readme = f.read()

version = os.environ.get('TRAVIS_TAG', '0.0.1-alpha.1+dirty')

setup(name='dyngame-solver',
      version=version,
      description='Solves constrained multi player dynamic games with an augmented lagrangian newton method',
      long_description=readme,
      long_description_content_type='text/markdown',
      classifiers=[
          'License :: OSI Approved :: MIT License',
          'Programming Language :: Python :: 3.7',
          'Development Status :: 4 - Beta',
      ],
      license='MIT',
      packages=find_packages(exclude=('test', 'docs')),
      package_data={'dyngame': ['data/*.json']},
      python_requires='>=3.7',
      entry_points={
          'console_scripts': [
              'dyngame = dyngame.app:main',
          ],
      },
      install_requires=[
          'numpy',
          'scipy',
          'matplotlib',
          'pyyaml'
      ],
      setup_requires=[
          'pytest-runner'
      ],
      tests_require=[
          'pytest',
          'hypothesis'
      ],
      include_package_data=True,
      zip_safe=False)
